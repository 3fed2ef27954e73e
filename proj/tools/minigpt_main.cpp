#include "minigpt/cli.hpp"

int main(int argc, char** argv) { return minigpt::run_cli(argc, argv); }
