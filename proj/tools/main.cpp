#include <iostream>

#include "cli.hpp"

int main(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return semmask::cli::run(args, semmask::cli::semmask_environment(), std::cout, std::cerr);
}
