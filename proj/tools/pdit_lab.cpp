#include <iostream>

#include "pdit_cli/commands.hpp"

int main(int argc, char** argv) { return pdit::cli::run(argc, argv, std::cout, std::cerr); }
