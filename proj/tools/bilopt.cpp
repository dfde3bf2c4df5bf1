#include "bilopt/harness.hpp"

int main(int argc, char** argv) { return bilopt::harness::cli_main(argc, argv); }
