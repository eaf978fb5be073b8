// SPDX-License-Identifier: Apache-2.0
#include <iostream>

int main() {
    std::cout << "flylora cli placeholder\n";
    return 0;
}
