#include "contourseg/cli.hpp"

int main(int argc, char** argv) { return contourseg::cli_run(argc, argv); }
