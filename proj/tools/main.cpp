#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"
#include "etide/training.hpp"

int main(int argc, char** argv) {
  etide::retain_freed_memory();
  std::vector<std::string> args(argv + 1, argv + argc);
  return etide::cli::run(args, std::cout, std::cerr);
}
