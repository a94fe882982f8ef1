#include <iostream>

int main() {
    std::cout << "fmix: placeholder\n";
    return 0;
}
