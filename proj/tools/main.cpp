#include "istdkd/commands.hpp"

int main(int argc, char** argv) { return istdkd::cli::dispatch(argc, argv); }
