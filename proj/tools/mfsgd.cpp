#include <iostream>
#include <string>
#include <vector>

#include "mfsgd/cli.hpp"

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  return mfsgd::run_cli(args, std::cout, std::cerr);
}
