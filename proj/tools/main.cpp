#include <iostream>

#include "dmr/cli.hpp"

int main(int argc, char** argv) { return dmr::run_cli(argc, argv, std::cout, std::cerr); }
