#include "qenv/cli.hpp"

#include <iostream>

int main(int argc, char **argv) { return qenv::cli::run(argc, argv, std::cout, std::cerr); }
