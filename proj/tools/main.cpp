#include <iostream>
#include <string>
#include <vector>

#include "nmt/cli.hpp"

int main(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return nmt::run_cli(args, std::cout, std::cerr);
}
