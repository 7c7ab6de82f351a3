#include <iostream>

#include "cirguard_cli/cli.hpp"

int main(int argc, char** argv) { return cirguard::cli::cli_main(argc, argv, std::cout, std::cerr); }
