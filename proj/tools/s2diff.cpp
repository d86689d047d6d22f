#include <iostream>

#include "s2diff/cli.hpp"

int main(int argc, char** argv) { return s2diff::run_cli(argc, argv, std::cout, std::cerr); }
