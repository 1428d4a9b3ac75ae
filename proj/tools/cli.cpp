#include "cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>

#include "aesr/niqe.hpp"
#include "aesr/training.hpp"

namespace aesr::cli {

namespace fs = std::filesystem;

namespace {

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string config;
  bool verbose = false;
};

std::string iter_tag(const fs::path& checkpoint) {
  const Archive a = load_archive(checkpoint);
  const auto it = a.metadata.find("iteration");
  return it == a.metadata.end() ? "0" : it->second;
}

// Inputs given as a file or a directory of images.
std::vector<fs::path> collect_inputs(const fs::path& input) {
  if (fs::is_directory(input)) {
    std::vector<fs::path> files = list_images(input);
    if (files.empty()) throw ArgumentError("no images found in " + input.string());
    return files;
  }
  if (!fs::exists(input)) throw IoError("input " + input.string() + " does not exist");
  return {input};
}

ImageTensor normalize_minmax(const Tensor<float>& map, bool& degenerate) {
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  const float a = *lo, b = *hi;
  degenerate = !(b > a);
  ImageTensor out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = degenerate ? 0.0f : (map[i] - a) / (b - a);
  return out;
}

void write_raw(const Tensor<float>& t, const fs::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

int cmd_synthesize(const Globals& g, const fs::path& input_dir, const fs::path& output_dir, std::ostream& out,
                   std::ostream& err) {
  DegradationConfig config;
  if (!g.config.empty()) {
    const KeyValueConfig kv = KeyValueConfig::load(g.config);
    config = DegradationConfig::from_config(kv);
    kv.reject_unknown_keys();
  }
  if (g.seed) config.seed = *g.seed;
  config.validate();
  const std::vector<fs::path> files = list_images(input_dir);
  if (files.empty()) throw ArgumentError("no images found in " + input_dir.string());
  fs::create_directories(output_dir);
  std::ofstream manifest(output_dir / "manifest.csv", std::ios::trunc);
  manifest << "hr,lr,seed\n";
  int written = 0, skipped = 0;
  for (std::size_t i = 0; i < files.size(); ++i) {
    ImageTensor hr = load_image(files[i]);
    if (hr.height() % 4 != 0 || hr.width() % 4 != 0) {
      err << "warning: skipping " << files[i].string() << ": " << hr.height() << "x" << hr.width()
          << " is not divisible by 4\n";
      ++skipped;
      continue;
    }
    const std::uint64_t seed = config.seed + i;
    Rng rng(seed);
    const ImageTensor lr = synthesize_lr(hr, config, rng);
    const fs::path lr_path = output_dir / (files[i].stem().string() + "_lr.png");
    save_png(lr, lr_path);
    manifest << csv_field(files[i].string()) << ',' << csv_field(lr_path.string()) << ',' << seed << '\n';
    ++written;
    if (g.verbose) err << "synthesized " << lr_path.string() << '\n';
  }
  out << "synthesized " << written << " LR images, skipped " << skipped << '\n';
  return kOk;
}

int cmd_train(const Globals& g, const std::string& resume, std::int64_t iterations, const std::string& output_dir,
              const std::string& export_path, std::ostream& out, std::ostream& err) {
  if (g.config.empty()) throw ArgumentError("train needs --config");
  KeyValueConfig kv = KeyValueConfig::load(g.config);
  if (g.seed) kv.set("seed", std::to_string(*g.seed));
  if (iterations >= 0) kv.set("total_iterations", std::to_string(iterations));
  if (!output_dir.empty()) kv.set("output_dir", output_dir);
  const TrainConfig config = TrainConfig::from_config(kv);
  TrainOptions options;
  if (!resume.empty()) options.resume = resume;
  if (g.verbose) {
    options.on_step = [&err](const StepMetrics& m) { err << m.csv_row() << '\n'; };
  }
  const TrainState state = train(config, options);
  if (!export_path.empty()) export_generator(state, export_path);
  out << "trained to iteration " << state.iteration << "; outputs in " << config.output_dir << '\n';
  return kOk;
}

int cmd_upscale(const fs::path& checkpoint, const fs::path& input, const fs::path& output, int tile, int overlap,
                const std::string& method, std::ostream& out, std::ostream& err, bool verbose) {
  std::optional<Generator<float>> gen;
  if (method == "model") {
    if (checkpoint.empty()) throw ArgumentError("upscale needs --checkpoint unless --method bicubic");
    gen.emplace(load_generator(checkpoint));
  } else if (method != "bicubic") {
    throw ArgumentError("--method must be 'model' or 'bicubic'");
  }
  const std::vector<fs::path> files = collect_inputs(input);
  const bool to_dir = fs::is_directory(input) || fs::is_directory(output);
  if (to_dir) fs::create_directories(output);
  for (const fs::path& f : files) {
    const ImageTensor lr = load_image(f);
    const ImageTensor sr = gen ? upscale_image(*gen, lr, tile, overlap) : resize(lr, 4.0, ResizeMode::bicubic);
    const fs::path dst = to_dir ? output / (f.stem().string() + ".png") : output;
    if (dst.has_parent_path()) fs::create_directories(dst.parent_path());
    save_png(sr, dst);
    if (verbose) err << f.string() << " -> " << dst.string() << '\n';
  }
  out << "upscaled " << files.size() << " image(s)\n";
  return kOk;
}

int cmd_evaluate(const fs::path& model_file, const std::vector<std::string>& dirs, const std::string& csv_path,
                 std::ostream& out, std::ostream& err) {
  const NiqeModel model = NiqeModel::load(model_file);
  struct Row {
    std::string method;
    int images;
    double mean;
  };
  std::vector<Row> rows;
  for (const std::string& d : dirs) {
    const std::vector<fs::path> files = list_images(d);
    double sum = 0;
    int n = 0;
    for (const fs::path& f : files) {
      try {
        sum += niqe_score(load_image(f), model);
        ++n;
      } catch (const Error& e) {
        err << "warning: skipping " << f.string() << ": " << e.what() << '\n';
      }
    }
    if (n == 0) throw ArgumentError("no scorable images in " + d);
    std::string name = fs::path(d).filename().string();
    if (name.empty()) name = fs::path(d).parent_path().filename().string();
    rows.push_back({name, n, sum / n});
  }
  char line[64];
  out << "method,images,niqe (lower is better)\n";
  for (const Row& r : rows) {
    std::snprintf(line, sizeof line, "%d,%.4f", r.images, r.mean);
    out << csv_field(r.method) << ',' << line << '\n';
  }
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot write " + csv_path);
    csv << "method,images,niqe\n";
    for (const Row& r : rows) csv << csv_field(r.method) << ',' << r.images << ',' << format_double(r.mean) << '\n';
  }
  return kOk;
}

int cmd_visualize(const fs::path& checkpoint, const fs::path& input, const std::string& what,
                  const fs::path& output_dir, bool raw, bool through_generator, std::ostream& out, std::ostream& err) {
  if (what != "attention" && what != "dmap") throw ArgumentError("--what must be 'attention' or 'dmap'");
  auto [d1, d2] = load_discriminators(checkpoint);
  const std::string iter = iter_tag(checkpoint);
  std::optional<Generator<float>> gen;
  if (through_generator) gen.emplace(load_generator(checkpoint));
  const std::vector<fs::path> files = collect_inputs(input);
  const int multiple = d2 ? 2 * d1.config().size_multiple() : d1.config().size_multiple();
  int written = 0;
  for (const fs::path& f : files) {
    ImageTensor img = load_image(f);
    if (gen) img = upscale_image(*gen, img);
    const int h = img.height() / multiple * multiple, w = img.width() / multiple * multiple;
    if (h == 0 || w == 0) throw ArgumentError(f.string() + " is smaller than " + std::to_string(multiple) + " px");
    if (h != img.height() || w != img.width()) {
      err << "warning: cropping " << f.string() << " to " << h << "x" << w << '\n';
      img = crop(img, 0, 0, h, w);
    }
    const fs::path dir = files.size() > 1 ? output_dir / f.stem() : output_dir;
    fs::create_directories(dir);
    ag::NoGradGuard no_grad;
    const ag::Var<float> x(img);
    auto emit = [&](const Tensor<float>& map, const std::string& stem) {
      bool degenerate = false;
      const ImageTensor norm = normalize_minmax(map, degenerate);
      if (degenerate) err << "warning: " << stem << " is constant\n";
      save_png(resize_to(norm, h, w, ResizeMode::nearest), dir / (stem + ".png"));
      if (raw) {
        write_raw(map, dir / (stem + "_" + std::to_string(map.height()) + "x" + std::to_string(map.width()) + ".f32"));
      }
      ++written;
    };
    if (what == "attention") {
      const DiscriminatorOutput<float> o = d1.forward(x, PowerIteration::frozen);
      for (std::size_t i = 0; i < o.attention_maps.size(); ++i) {
        emit(o.attention_maps[i].value(), "att_layer" + std::to_string(i + 1) + "_iter" + iter);
      }
    } else {
      auto prob = [](const ag::Var<float>& logits) { return ag::sigmoid(logits).value(); };
      const Tensor<float> p1 = prob(d1.forward(x, PowerIteration::frozen).logits);
      ImageTensor v1(p1.shape());
      std::copy(p1.data(), p1.data() + p1.size(), v1.data());
      save_png(v1, dir / ("dmap_d1_iter" + iter + ".png"));
      if (raw) write_raw(p1, dir / ("dmap_d1_iter" + iter + ".f32"));
      ++written;
      if (d2) {
        const Tensor<float> p2 = prob(d2->forward(half_scale(x), PowerIteration::frozen).logits);
        save_png(resize_to(p2, h, w, ResizeMode::nearest), dir / ("dmap_d2_iter" + iter + ".png"));
        if (raw) write_raw(p2, dir / ("dmap_d2_iter" + iter + ".f32"));
        ++written;
      }
    }
  }
  out << "wrote " << written << " map(s) to " << output_dir.string() << '\n';
  return kOk;
}

int cmd_fit_pristine(const fs::path& corpus, const fs::path& output, double ridge, int patch, double sharpness,
                     std::ostream& out) {
  const NiqeModel m = fit_pristine_model(corpus, ridge, patch, sharpness);
  if (output.has_parent_path()) fs::create_directories(output.parent_path());
  m.save(output);
  out << "wrote NIQE model to " << output.string() << '\n';
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Blind x4 super-resolution with attention U-Net discriminators", "aesrgan"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value, "Seed overriding the configuration");
  app.add_option("--config", g.config, "Configuration file");
  app.add_flag("--verbose,-v", g.verbose, "Per-item progress on stderr");

  std::string in_dir, out_dir;
  auto* syn = app.add_subcommand("synthesize", "Degrade HR images into x4 LR inputs");
  syn->add_option("--input-dir", in_dir, "Directory of HR images")->required();
  syn->add_option("--output-dir", out_dir, "Destination for *_lr.png and manifest.csv")->required();

  std::string resume, tr_out, export_path;
  std::int64_t iterations = -1;
  auto* tr = app.add_subcommand("train", "Train from --config");
  tr->add_option("--resume", resume, "Checkpoint to continue from");
  tr->add_option("--iterations", iterations, "Override total_iterations (-1 keeps the config value)");
  tr->add_option("--output-dir", tr_out, "Override output_dir");
  tr->add_option("--export", export_path, "Also write a generator-only archive here");

  std::string ckpt, input, output, method = "model";
  int tile = 256, overlap = 16;
  auto* up = app.add_subcommand("upscale", "x4 upscale an image or a directory of images");
  up->add_option("--checkpoint", ckpt, "Training checkpoint or generator export");
  up->add_option("--input", input, "Image file or directory")->required();
  up->add_option("--output", output, "Output file, or directory for directory input")->required();
  up->add_option("--tile", tile, "Tile size in LR pixels (0 disables tiling)");
  up->add_option("--overlap", overlap, "Tile overlap in LR pixels");
  up->add_option("--method", method, "model or bicubic");

  std::string model_file = default_niqe_model_path().string(), csv_path;
  std::vector<std::string> dirs;
  auto* ev = app.add_subcommand("evaluate", "Mean NIQE per directory");
  ev->add_option("--model-file", model_file, "Pristine NIQE model");
  ev->add_option("--dirs", dirs, "Directories to score, one row each")->required();
  ev->add_option("--csv", csv_path, "Also write the table as CSV");

  std::string what = "attention", vis_out;
  bool raw = false, through = false;
  auto* vi = app.add_subcommand("visualize", "Dump attention maps or discriminator probability maps");
  vi->add_option("--checkpoint", ckpt, "Training checkpoint with discriminators")->required();
  vi->add_option("--input", input, "Image file or directory")->required();
  vi->add_option("--what", what, "attention or dmap")->check(CLI::IsMember({"attention", "dmap"}));
  vi->add_option("--output-dir", vis_out, "Destination directory")->required();
  vi->add_flag("--raw", raw, "Also dump the unnormalised maps as float32 arrays");
  vi->add_flag("--through-generator", through, "Feed the generator's x4 output instead of the input");

  std::string corpus, model_out;
  double ridge = 1e-3, sharpness = 0.75;
  int patch = 96;
  auto* fp = app.add_subcommand("fit-pristine", "Fit a NIQE model on a pristine corpus");
  fp->add_option("--corpus", corpus, "Directory of pristine images")->required();
  fp->add_option("--output", model_out, "Model file to write")->required();
  fp->add_option("--ridge", ridge, "Ridge added to the covariance diagonal");
  fp->add_option("--patch-size", patch, "Patch size");
  fp->add_option("--sharpness", sharpness, "Sharpness selection fraction");

  std::vector<std::string> argv_store{"aesrgan"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUserError;
  }
  if (seed_opt->count() > 0) g.seed = seed_value;

  try {
    if (*syn) return cmd_synthesize(g, in_dir, out_dir, out, err);
    if (*tr) return cmd_train(g, resume, iterations, tr_out, export_path, out, err);
    if (*up) return cmd_upscale(ckpt, input, output, tile, overlap, method, out, err, g.verbose);
    if (*ev) return cmd_evaluate(model_file, dirs, csv_path, out, err);
    if (*vi) return cmd_visualize(ckpt, input, what, vis_out, raw, through, out, err);
    if (*fp) return cmd_fit_pristine(corpus, model_out, ridge, patch, sharpness, out);
  } catch (const IntegrityError& e) {
    err << "error: " << e.what() << '\n';
    return kInternalError;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kInternalError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kUserError;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kInternalError;
  }
  return kUserError;
}

}  // namespace aesr::cli
