// Command-line front end: train, eval, infer, flops and plot sub-commands.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dfft/checkpoint.hpp"
#include "dfft/coco.hpp"
#include "dfft/config.hpp"
#include "dfft/data.hpp"
#include "dfft/evaluate.hpp"
#include "dfft/flops.hpp"
#include "dfft/image_io.hpp"
#include "dfft/model.hpp"
#include "dfft/train.hpp"

namespace {

// --data accepts "synth", "synth:N" or "coco:IMAGE_DIR,ANNOTATIONS"
std::vector<dfft::Sample> make_dataset(const std::string& spec, const dfft::ModelConfig& cfg) {
  if (spec == "synth" || spec.rfind("synth:", 0) == 0) {
    int n = 20;
    if (spec.size() > 6) {
      try {
        n = std::stoi(spec.substr(6));
      } catch (...) {
        throw dfft::ConfigError("bad synth count in --data " + spec);
      }
    }
    return dfft::synth_dataset(n, cfg.train.image_size, cfg.train.seed);
  }
  if (spec.rfind("coco:", 0) == 0) {
    auto rest = spec.substr(5);
    auto comma = rest.find(',');
    if (comma == std::string::npos)
      throw dfft::ConfigError("--data coco needs IMAGE_DIR,ANNOTATIONS");
    return dfft::load_coco(rest.substr(0, comma), rest.substr(comma + 1), cfg.train.image_size)
        .samples;
  }
  throw dfft::ConfigError("unknown --data spec " + spec + " (use synth, synth:N or coco:DIR,ANN)");
}

struct CkptModel {
  dfft::ModelConfig cfg;
  dfft::ParamStore ps;
  dfft::AdamW opt;
};

CkptModel load_model(const std::string& ckpt_path) {
  auto header = dfft::peek_checkpoint(ckpt_path);
  CkptModel m{dfft::parse_config(header.config_json), dfft::ParamStore(0), dfft::AdamW{}};
  dfft::build_params(m.cfg, m.ps);
  dfft::load_checkpoint(ckpt_path, m.ps, m.opt);
  return m;
}

std::string basename_of(const std::string& path) {
  auto slash = path.find_last_of('/');
  return slash == std::string::npos ? path : path.substr(slash + 1);
}

int run_train(const std::string& config_path, const std::string& data_spec,
              const std::string& out_dir, const std::string& resume, int stop_after,
              bool verbose) {
  auto cfg = dfft::load_config(config_path);
  auto data = make_dataset(data_spec, cfg);
  dfft::TrainOptions topt;
  topt.out_dir = out_dir;
  topt.resume = resume;
  topt.stop_after = stop_after;
  topt.verbose = verbose;
  auto res = dfft::train_detector(cfg, data, topt);
  std::cout << "trained " << res.epochs_run << " epochs (" << res.steps << " steps this run)\n";
  if (res.final_ap50 >= 0.0) std::cout << "ap50 " << res.final_ap50 << "\n";
  std::cout << "checkpoint " << res.ckpt_path << "\nlog " << res.csv_path << "\n";
  return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_spec) {
  auto m = load_model(ckpt_path);
  auto data = make_dataset(data_spec, m.cfg);
  auto anchors = dfft::anchors_for(m.cfg);
  auto metrics = dfft::evaluate_model(data, m.cfg, m.ps, anchors);
  std::printf("ap %.6f\nap50 %.6f\nap75 %.6f\n", metrics.ap, metrics.ap50, metrics.ap75);
  for (std::size_t c = 0; c < metrics.per_class.size(); ++c) {
    if (metrics.per_class[c] < 0.0)
      std::printf("class %zu ap -\n", c);
    else
      std::printf("class %zu ap %.6f\n", c, metrics.per_class[c]);
  }
  return 0;
}

int run_infer(const std::string& ckpt_path, const std::string& image_path,
              const std::string& out_path) {
  auto m = load_model(ckpt_path);
  auto img = dfft::read_image(image_path);
  double scale = 1.0;
  auto map = dfft::letterbox_image(img, m.cfg.train.image_size, scale);
  auto anchors = dfft::anchors_for(m.cfg);
  auto dets = dfft::detect(map, m.cfg, m.ps, anchors);

  std::ostream* os = &std::cout;
  std::ofstream file;
  if (!out_path.empty() && out_path != "-") {
    file.open(out_path, std::ios::trunc);
    if (!file) throw dfft::IoError("cannot write " + out_path);
    os = &file;
  }
  std::string id = basename_of(image_path);
  for (const auto& d : dets) {
    dfft::Box b{d.box.x1 / scale, d.box.y1 / scale, d.box.x2 / scale, d.box.y2 / scale};
    b = dfft::clip_box(b, img.w, img.h);
    nlohmann::json j;
    j["id"] = id;
    j["box"] = {b.x1, b.y1, b.x2, b.y2};
    j["class"] = d.cls;
    j["score"] = d.score;
    *os << j.dump() << "\n";
  }
  return 0;
}

int run_flops(const std::string& config_path, std::int64_t width, std::int64_t height) {
  auto cfg = dfft::load_config(config_path);
  if (width <= 0) width = cfg.train.image_size;
  if (height <= 0) height = cfg.train.image_size;
  auto rep = dfft::macs_model(cfg.backbone, cfg.encoders,
                              static_cast<int>(cfg.head.anchor_sizes.size()),
                              cfg.head.num_classes, height, width);
  std::cout << rep.to_text();
  auto cmp = dfft::compare_single_vs_multilevel(cfg.backbone, cfg.encoders,
                                                static_cast<int>(cfg.head.anchor_sizes.size()),
                                                cfg.head.num_classes, height, width);
  std::printf("neck+head vs multi-level alternative: %llu vs %llu macs (ratio %.4f)\n",
              static_cast<unsigned long long>(cmp.single_macs),
              static_cast<unsigned long long>(cmp.multilevel_macs), cmp.ratio);
  return 0;
}

struct Series {
  std::vector<double> x, y;
  std::string label;
};

Series read_series(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw dfft::IoError("cannot open log " + csv_path);
  std::string line;
  if (!std::getline(in, line)) throw dfft::ParseError("log is empty");
  std::vector<std::string> cols;
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cols.push_back(c);
  }
  auto col_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < cols.size(); ++i)
      if (cols[i] == name) return static_cast<int>(i);
    throw dfft::ParseError("log lacks column " + name);
  };
  int c_epoch = col_of("epoch"), c_loss = col_of("mean_loss"), c_ap = col_of("ap50");

  Series ap{{}, {}, "ap50"}, loss{{}, {}, "mean loss"};
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) f.push_back(c);
    while (f.size() < cols.size()) f.push_back("");
    double e = std::stod(f[static_cast<std::size_t>(c_epoch)]);
    loss.x.push_back(e);
    loss.y.push_back(std::stod(f[static_cast<std::size_t>(c_loss)]));
    const auto& a = f[static_cast<std::size_t>(c_ap)];
    if (!a.empty()) {
      ap.x.push_back(e);
      ap.y.push_back(std::stod(a));
    }
  }
  if (loss.x.empty()) throw dfft::ParseError("log has no data rows");
  return ap.x.size() >= 2 ? ap : loss;
}

int run_plot(const std::string& csv_path, const std::string& out_path) {
  auto s = read_series(csv_path);
  double x_max = *std::max_element(s.x.begin(), s.x.end());
  double x_min = *std::min_element(s.x.begin(), s.x.end());
  double y_max = *std::max_element(s.y.begin(), s.y.end());
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max <= 0) y_max = 1;
  y_max *= 1.05;

  const double W = 640, H = 400, L = 60, R = 20, T = 24, Bm = 44;
  auto px = [&](double x) { return L + (x - x_min) / (x_max - x_min) * (W - L - R); };
  auto py = [&](double y) { return H - Bm - y / y_max * (H - T - Bm); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<g font-family=\"sans-serif\" font-size=\"12\" fill=\"#333\">\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - Bm
      << "\" stroke=\"#333\"/>\n";
  svg << "<line x1=\"" << L << "\" y1=\"" << H - Bm << "\" x2=\"" << W - R << "\" y2=\""
      << H - Bm << "\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 5; ++i) {
    double yv = y_max * i / 5.0, yy = py(yv);
    svg << "<line x1=\"" << L - 4 << "\" y1=\"" << yy << "\" x2=\"" << L << "\" y2=\"" << yy
        << "\" stroke=\"#333\"/>\n<text x=\"" << L - 8 << "\" y=\"" << yy + 4
        << "\" text-anchor=\"end\">" << std::fixed << std::setprecision(2) << yv << "</text>\n";
    double xv = x_min + (x_max - x_min) * i / 5.0, xx = px(xv);
    svg << "<line x1=\"" << xx << "\" y1=\"" << H - Bm << "\" x2=\"" << xx << "\" y2=\""
        << H - Bm + 4 << "\" stroke=\"#333\"/>\n<text x=\"" << xx << "\" y=\"" << H - Bm + 18
        << "\" text-anchor=\"middle\">" << std::setprecision(xv == std::floor(xv) ? 0 : 1) << xv
        << "</text>\n";
  }
  svg << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8
      << "\" text-anchor=\"middle\">epoch</text>\n";
  svg << "<text x=\"16\" y=\"" << (T + H - Bm) / 2
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (T + H - Bm) / 2 << ")\">"
      << s.label << "</text>\n";
  svg << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
  for (std::size_t i = 0; i < s.x.size(); ++i) svg << px(s.x[i]) << "," << py(s.y[i]) << " ";
  svg << "\"/>\n";
  for (std::size_t i = 0; i < s.x.size(); ++i)
    svg << "<circle cx=\"" << px(s.x[i]) << "\" cy=\"" << py(s.y[i])
        << "\" r=\"3\" fill=\"#1f77b4\"/>\n";
  svg << "</g>\n</svg>\n";

  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw dfft::IoError("cannot write " + out_path);
  out << svg.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"decoder-free transformer object detector"};
  app.require_subcommand(1);

  std::string config_path, data_spec = "synth", out_dir = "out", resume, ckpt_path, image_path;
  std::string out_path, log_path;
  int stop_after = 0;
  bool verbose = false, deterministic = false;
  std::int64_t width = 0, height = 0;

  auto* t = app.add_subcommand("train", "train a detector");
  t->add_option("--config", config_path, "model config JSON")->required();
  t->add_option("--data", data_spec, "synth, synth:N or coco:DIR,ANN");
  t->add_option("--out", out_dir, "output directory");
  t->add_option("--resume", resume, "checkpoint to continue from");
  t->add_option("--stop-after", stop_after, "pause after this epoch");
  t->add_flag("--deterministic", deterministic, "single-threaded bit-stable mode (always on)");
  t->add_flag("--verbose", verbose, "per-epoch progress on stderr");

  auto* e = app.add_subcommand("eval", "score a checkpoint on a dataset");
  e->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  e->add_option("--data", data_spec, "synth, synth:N or coco:DIR,ANN")->required();

  auto* i = app.add_subcommand("infer", "detect objects in one image");
  i->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  i->add_option("--image", image_path, "input image (png, jpeg or pnm)")->required();
  i->add_option("--out", out_path, "JSON lines output, - for stdout");

  auto* f = app.add_subcommand("flops", "print the arithmetic cost report");
  f->add_option("--config", config_path, "model config JSON")->required();
  f->add_option("--width", width, "input width, defaults to the config image size");
  f->add_option("--height", height, "input height");

  auto* p = app.add_subcommand("plot", "render the training log as an SVG curve");
  p->add_option("--log", log_path, "train_log.csv from a run")->required();
  p->add_option("--out", out_path, "output SVG path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    std::cerr << err.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (t->parsed()) return run_train(config_path, data_spec, out_dir, resume, stop_after, verbose);
    if (e->parsed()) return run_eval(ckpt_path, data_spec);
    if (i->parsed()) return run_infer(ckpt_path, image_path, out_path);
    if (f->parsed()) return run_flops(config_path, width, height);
    if (p->parsed()) return run_plot(log_path, out_path);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
