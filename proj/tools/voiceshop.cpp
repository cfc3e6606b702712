#include "voiceshop/pipeline.hpp"

int main(int argc, char** argv) { return vs::pipeline::main_cli(argc, argv); }
