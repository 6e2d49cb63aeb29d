#include "vesselforge/cli.hpp"

int main(int argc, char** argv) { return vesselforge::cli::dispatch(argc, argv); }
