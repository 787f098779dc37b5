#include <cstdio>

int main() {
  std::puts("mtsplat: subcommands not wired up yet");
  return 0;
}
