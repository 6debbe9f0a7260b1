#include <iostream>

#include "manet/cli.hpp"

int main(int argc, char** argv) { return manet::cli::run(argc, argv, std::cout, std::cerr); }
