#include <malloc.h>

#include <csignal>
#include <iostream>
#include <string>
#include <vector>

#include "dagnas/cli.hpp"

namespace {

void on_interrupt(int) { dagnas::cli::stop_requested().store(true); }

}  // namespace

int main(int argc, char** argv) {
  // Keep large activation buffers on the heap instead of fresh mmaps.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  std::signal(SIGINT, on_interrupt);
  std::signal(SIGTERM, on_interrupt);
  const std::vector<std::string> args(argv, argv + argc);
  return dagnas::cli::run(args, std::cout, std::cerr);
}
