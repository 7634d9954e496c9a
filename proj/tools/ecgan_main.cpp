#include <cstdio>

int main() {
    std::puts("ecgan: subcommands not wired up yet");
    return 2;
}
