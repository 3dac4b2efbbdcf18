#include "cli.hpp"

int main(int argc, char** argv) {
  try {
    return vitlm::cli::run(std::vector<std::string>(argv + 1, argv + argc));
  } catch (const std::exception& e) {
    std::cerr << vitlm::cli::error_line("internal", e.what()) << "\n";
    return 1;
  }
}
