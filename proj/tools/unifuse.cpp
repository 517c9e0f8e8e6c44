#include <iostream>

#include "unifuse/cli.hpp"

int main(int argc, char** argv) { return unifuse::run_cli(argc, argv, std::cout, std::cerr); }
