#include "llama/cli.hpp"

int main(int argc, char** argv) { return llama::dispatch(argc, argv); }
