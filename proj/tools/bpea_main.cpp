#include <iostream>

#include "CLI11.hpp"
#include "gocoma/bpea.hpp"

int main(int argc, char** argv) {
  using namespace gocoma::bpea;
  CLI::App app{"Render source programs as BPEA images"};
  app.require_subcommand(1);

  auto* conv = app.add_subcommand("convert", "Compile (or normalize) sources and write 256-wide RGB PNGs");
  std::string lang;
  ConvertOptions opts;
  std::string input, output, manifest;
  conv->add_option("--lang", lang, "c, cpp, java or python")->required()->check(CLI::IsMember({"c", "cpp", "java", "python"}));
  conv->add_option("--in", input, "Source file or directory")->required();
  conv->add_option("--out", output, "Image output directory")->required();
  conv->add_option("--manifest", manifest, "JSON-lines manifest path")->required();
  conv->add_flag("--fallback-only", opts.fallback_only, "Skip compilation; always normalize the source text");
  conv->add_option("--jobs", opts.jobs, "Parallel workers")->check(CLI::PositiveNumber);
  conv->add_option("--cc", opts.toolchain.cc);
  conv->add_option("--cxx", opts.toolchain.cxx);
  conv->add_option("--javac", opts.toolchain.javac);
  conv->add_option("--python", opts.toolchain.python);

  CLI11_PARSE(app, argc, argv);
  try {
    opts.language = parse_language(lang);
    opts.input = input;
    opts.output_dir = output;
    opts.manifest = manifest;
    const auto entries = convert(opts);
    std::size_t fallback = 0;
    for (const auto& e : entries) fallback += e.origin == Origin::fallback;
    std::cerr << "converted " << entries.size() << " files (" << fallback << " fallback-normalized)\n";
  } catch (const std::exception& e) {
    std::cerr << "bpea: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
