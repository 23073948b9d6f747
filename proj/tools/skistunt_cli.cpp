// Command-line front end; subcommands are filled in as the library lands.
#include <cstdio>

int main() {
  std::puts("skistunt: no subcommand given");
  return 2;
}
