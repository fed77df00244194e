#include <exception>
#include <iostream>

#include "cli_app.hpp"

int main(int argc, char** argv) {
  try {
    return cgmf::cli::run_cli({argv + 1, argv + argc}, std::cout, std::cerr);
  } catch (const std::exception& e) {
    std::cerr << "cgmf: internal error: " << e.what() << "\n";
    return 1;
  }
}
