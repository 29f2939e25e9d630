// Placeholder entry point; subcommands land with the harness.
#include <cstdio>

int main() {
  std::fprintf(stderr, "simplr: no subcommand given\n");
  return 2;
}
