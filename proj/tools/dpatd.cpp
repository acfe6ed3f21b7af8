// SPDX-License-Identifier: Apache-2.0
#include <malloc.h>

#include <iostream>
#include <string>
#include <vector>

#include "dpatd/cli.hpp"

int main(int argc, char** argv) {
  // Autograd temporaries are large and short-lived; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::vector<std::string> args(argv + 1, argv + argc);
  return dpatd::run_command(args, std::cout, std::cerr);
}
