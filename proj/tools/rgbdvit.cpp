// Command-line front end for the rgbdvit library.

#include <csignal>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rgbdvit/data.hpp"
#include "rgbdvit/depthrep.hpp"
#include "rgbdvit/evalharness.hpp"
#include "rgbdvit/fusion.hpp"
#include "rgbdvit/image_io.hpp"
#include "rgbdvit/lifelong.hpp"
#include "rgbdvit/teachd.hpp"

using namespace rgbdvit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void emit(const json& report, const std::string& path) {
  if (path.empty()) {
    std::cout << report.dump(2) << "\n";
    return;
  }
  if (fs::path(path).has_parent_path()) fs::create_directories(fs::path(path).parent_path());
  write_text(path, report.dump(2) + "\n");
  std::cerr << "report written to " << path << "\n";
}

nn::ModelSpec spec_from_arg(const std::string& arg) {
  if (fs::exists(arg)) return json::parse(read_text(arg)).get<nn::ModelSpec>();
  return nn::ModelSpec::preset(arg);
}

fusion::FusionSpec fusion_from_flags(fusion::FusionSpec base, const std::string& mode, const std::string& late_op) {
  if (mode.empty()) return base;
  base.mode = fusion::mode_from_string(mode);
  base.late_op.reset();
  if (base.mode == fusion::Mode::late) base.late_op = fusion::late_op_from_string(late_op.empty() ? "cat" : late_op);
  else if (!late_op.empty()) throw InvalidArgument("--late-op only applies to --fusion late");
  base.validate();
  return base;
}

// "early-dual", "late-cat", "rgb", ...
fusion::FusionSpec fusion_from_label(fusion::FusionSpec base, const std::string& label) {
  if (label.rfind("late-", 0) == 0) return fusion_from_flags(base, "late", label.substr(5));
  return fusion_from_flags(base, label, "");
}

// Checkpoint as a model of the requested mode: used as-is when it already is
// one, otherwise derived from a unimodal checkpoint.
template <class T>
fusion::FusionModel<T> model_for(const std::string& path, const std::string& mode, const std::string& late_op,
                                 std::uint64_t seed = 0) {
  auto ck = nn::load_checkpoint<T>(path);
  auto have = fusion::spec_of(ck);
  auto want = fusion_from_flags(have, mode, late_op);
  if (want.mode == have.mode && want.late_op == have.late_op) return fusion::model_from_checkpoint(std::move(ck));
  return fusion::init_from_rgb_checkpoint(ck, want, seed);
}

data::SplitManifest split_or_all(const data::DatasetIndex& idx, const std::string& path) {
  if (!path.empty()) return data::load_split(path);
  data::SplitManifest s;
  s.kind = "all";
  s.root = idx.root.string();
  s.train = s.test = idx.ids();
  return s;
}

fs::path feature_cache(const std::string& split_path, const std::string& fingerprint, const std::string& part) {
  fs::path base = split_path.empty() ? fs::temp_directory_path() / "rgbdvit-features" : fs::path(split_path).parent_path() / "features";
  std::string stem = split_path.empty() ? "all" : fs::path(split_path).stem().string();
  fs::create_directories(base);
  return base / (stem + "-" + part + "-" + fingerprint.substr(0, 16) + ".json");
}

template <class T>
std::vector<fusion::RgbdSample<T>> samples_of(const data::DatasetIndex& idx, const std::vector<std::string>& ids,
                                              std::size_t image_size, std::size_t threads) {
  return data::load_samples<T>(idx, ids, depth::PreprocessSpec::square(image_size), threads);
}

struct Common {
  std::string data, split, report, checkpoint, fusion, late_op;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

void add_common(CLI::App* c, Common& o, bool need_ckpt = true) {
  c->add_option("--data", o.data, "Dataset root")->required();
  c->add_option("--split", o.split, "Split manifest (default: every entry in both halves)");
  c->add_option("--report", o.report, "Write the report here instead of stdout");
  auto* ck = c->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  if (need_ckpt) ck->required();
  c->add_option("--fusion", o.fusion, "rgb | depth | early-dual | early-joint | late");
  c->add_option("--late-op", o.late_op, "avg | max | cat");
  c->add_option("--seed", o.seed, "Seed");
  c->add_option("--threads", o.threads, "Worker threads (0: all cores)");
}

template <class T>
int run_train(const Common& o, const std::string& spec_arg, const std::string& out, eval::FinetuneConfig cfg) {
  auto idx = data::scan(o.data);
  auto split = split_or_all(idx, o.split);
  nn::ModelSpec spec = spec_from_arg(spec_arg);
  spec.num_classes = idx.categories.size();
  auto fspec = fusion_from_flags(fusion::FusionSpec{fusion::Mode::rgb_only, std::nullopt, spec}, o.fusion.empty() ? "rgb" : o.fusion, o.late_op);
  auto m = fusion::init_model<T>(fspec, o.seed);
  auto train = samples_of<T>(idx, split.train, spec.image_size, o.threads);
  auto test = samples_of<T>(idx, split.test, spec.image_size, o.threads);
  cfg.seed = o.seed;
  cfg.threads = o.threads;
  auto res = eval::finetune<T>(std::move(m), train, test, cfg, idx.categories);
  fusion::save_model(out, res.model);
  json r = res.report;
  r["checkpoint"] = out;
  r["precision"] = nn::dtype_name<T>();
  emit(r, o.report);
  return 0;
}

template <class T>
int run_eval(const Common& o) {
  auto idx = data::scan(o.data);
  auto split = split_or_all(idx, o.split);
  auto m = model_for<T>(o.checkpoint, o.fusion, o.late_op, o.seed);
  auto test = samples_of<T>(idx, split.test, m.spec.base.image_size, o.threads);
  json r = eval::evaluate<T>(m, test, o.threads, idx.categories);
  r["checkpoint"] = o.checkpoint;
  r["precision"] = nn::dtype_name<T>();
  emit(r, o.report);
  return 0;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

httplib::Server* g_server = nullptr;
teachd::TeachService* g_service = nullptr;

void on_signal(int) {
  if (g_service) g_service->stop();
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RGB-D vision transformer toolkit"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Informational logging");

  // encode-depth
  auto* enc = app.add_subcommand("encode-depth", "Encode 16-bit millimeter depth PNGs as 3-channel images");
  std::string enc_format = "surfnorm", enc_intr, enc_in, enc_out;
  double enc_dmax = 3.5;
  std::size_t enc_window = 5;
  enc->add_option("--format", enc_format, "raw | hha | surfnorm")->check(CLI::IsMember({"raw", "hha", "surfnorm"}));
  enc->add_option("--dmax", enc_dmax, "Clip distance in meters (raw)");
  enc->add_option("--intrinsics", enc_intr, "Intrinsics file (fx, fy, cx, cy, width, height)");
  enc->add_option("--window", enc_window, "Normal estimation window");
  enc->add_option("--in", enc_in, "Input directory")->required();
  enc->add_option("--out", enc_out, "Output directory")->required();

  // train / eval
  Common tr;
  std::string tr_spec = "toy", tr_out, tr_precision = "f32";
  eval::FinetuneConfig tr_cfg;
  tr_cfg.fresh_head = false;
  auto* train = app.add_subcommand("train", "Train a model from scratch");
  add_common(train, tr, false);
  train->add_option("--spec", tr_spec, "Preset (toy, tiny, small, base) or model spec file");
  train->add_option("--out", tr_out, "Output checkpoint")->required();
  train->add_option("--precision", tr_precision)->check(CLI::IsMember({"f32", "f64"}));
  train->add_option("--lr", tr_cfg.lr);
  train->add_option("--batch", tr_cfg.batch);
  train->add_option("--epochs", tr_cfg.epochs);
  train->add_option("--weight-decay", tr_cfg.weight_decay);

  Common ev;
  std::string ev_precision = "f32";
  auto* evalc = app.add_subcommand("eval", "Top-1 accuracy of a checkpoint on the test half of a split");
  add_common(evalc, ev);
  evalc->add_option("--precision", ev_precision)->check(CLI::IsMember({"f32", "f64"}));

  // data
  data::SynthConfig syn;
  std::string syn_out, syn_dep = "joint-only";
  auto* gen = app.add_subcommand("gen-synthetic", "Generate a synthetic RGB-D dataset");
  gen->add_option("--out", syn_out)->required();
  gen->add_option("--categories", syn.categories);
  gen->add_option("--instances", syn.instances);
  gen->add_option("--views", syn.views);
  gen->add_option("--size", syn.image_size);
  gen->add_option("--seed", syn.seed);
  gen->add_option("--dependence", syn_dep)->check(CLI::IsMember({"rgb-separable", "depth-separable", "joint-only"}));
  gen->add_option("--depth-encoding", syn.depth_encoding, "none | raw | hha | surfnorm");

  std::string rod_src, rod_dst, rod_format = "surfnorm";
  double rod_focal = 570.3;
  auto* rod = app.add_subcommand("import-rod", "Convert a ROD-style crop tree to the canonical layout");
  rod->add_option("--src", rod_src)->required();
  rod->add_option("--dst", rod_dst)->required();
  rod->add_option("--format", rod_format)->check(CLI::IsMember({"raw", "hha", "surfnorm"}));
  rod->add_option("--focal", rod_focal);

  std::string sp_kind, sp_data, sp_out, sp_base, sp_held;
  std::uint64_t sp_seed = 0;
  std::size_t sp_k = 10, sp_fold = 0, sp_shots = 1;
  auto* split = app.add_subcommand("split", "Write a split manifest");
  split->add_option("--kind", sp_kind)->required()->check(CLI::IsMember({"trial", "kfold", "fewshot"}));
  split->add_option("--data", sp_data, "Dataset root (trial, kfold)");
  split->add_option("--out", sp_out)->required();
  split->add_option("--seed", sp_seed);
  split->add_option("--k", sp_k, "Folds (kfold)");
  split->add_option("--fold", sp_fold, "Fold index (kfold)");
  split->add_option("--shots", sp_shots, "Views per instance (fewshot)");
  split->add_option("--base", sp_base, "Base manifest (fewshot)");
  split->add_option("--held-out", sp_held, "JSON map category -> held-out instance (trial)");

  // evaluation regimes
  Common kn;
  std::size_t kn_k = 3;
  auto* knn = app.add_subcommand("eval-knn", "k-NN on frozen features");
  add_common(knn, kn);
  knn->add_option("--k", kn_k);

  Common li;
  eval::LinearConfig li_cfg;
  auto* lin = app.add_subcommand("eval-linear", "Linear classifier on frozen features");
  add_common(lin, li);
  lin->add_option("--lr", li_cfg.lr);
  lin->add_option("--momentum", li_cfg.momentum);
  lin->add_option("--batch", li_cfg.batch);
  lin->add_option("--epochs", li_cfg.epochs);

  Common ft;
  eval::FinetuneConfig ft_cfg;
  std::string ft_out, ft_profile = "default";
  auto* fine = app.add_subcommand("finetune", "End-to-end fine-tuning");
  add_common(fine, ft);
  fine->add_option("--out", ft_out, "Output checkpoint");
  fine->add_option("--profile", ft_profile)->check(CLI::IsMember({"default", "variant"}));
  auto* ft_lr = fine->add_option("--lr", ft_cfg.lr);
  auto* ft_batch = fine->add_option("--batch", ft_cfg.batch);
  fine->add_option("--epochs", ft_cfg.epochs);
  fine->add_option("--weight-decay", ft_cfg.weight_decay);
  fine->add_option("--head-hidden", ft_cfg.head_hidden, "MLP head width (0: feature width)");
  fine->add_option("--head-warmup-epochs", ft_cfg.head_warmup_epochs, "Head-only epochs before end-to-end training");
  fine->add_option("--head-warmup-lr", ft_cfg.head_warmup_lr);

  Common tf;
  eval::FinetuneConfig tf_cfg;
  std::string tf_modes = "early-dual,late-cat", tf_shots = "0,1,5,10,20";
  bool tf_no_ceiling = false;
  auto* transfer = app.add_subcommand("transfer", "Few-shot transfer from a source checkpoint");
  add_common(transfer, tf);
  transfer->add_option("--modes", tf_modes);
  transfer->add_option("--shots", tf_shots);
  transfer->add_option("--lr", tf_cfg.lr);
  transfer->add_option("--batch", tf_cfg.batch);
  transfer->add_option("--epochs", tf_cfg.epochs);
  transfer->add_flag("--no-ceiling", tf_no_ceiling, "Skip the target-only baseline");

  // lifelong
  Common pr;
  lifelong::TeacherConfig pr_cfg;
  std::size_t pr_runs = 10;
  auto* proto = app.add_subcommand("protocol", "Simulated-teacher open-ended protocol");
  add_common(proto, pr, false);
  proto->add_option("--extractor", pr.checkpoint, "Frozen model checkpoint")->required();
  proto->add_option("--threshold", pr_cfg.threshold);
  proto->add_option("--runs", pr_runs);
  proto->add_option("--k", pr_cfg.k);
  proto->add_option("--budget", pr_cfg.budget);
  proto->add_option("--window-factor", pr_cfg.window_factor);
  proto->add_flag("--count-teaches", pr_cfg.count_teaches);

  // service
  teachd::ServiceConfig sv;
  std::string sv_host = "0.0.0.0", sv_late, sv_ckpt, sv_data;
  int sv_port = 8080;
  auto* serve = app.add_subcommand("serve", "Run the teaching service");
  serve->add_option("--port", sv_port);
  serve->add_option("--host", sv_host);
  serve->add_option("--checkpoint", sv_ckpt, "Default extractor checkpoint");
  serve->add_option("--fusion", sv.fusion, "Default fusion mode (rgb, depth, late-cat, ...)");
  serve->add_option("--data-dir", sv_data, "Session persistence directory");
  serve->add_option("--k", sv.k);
  serve->add_option("--focal", sv.depth.focal, "Focal length in pixels for client crops");

  CLI11_PARSE(app, argc, argv);
  if (verbose) log_level() = LogLevel::info;

  try {
    if (*enc) {
      std::optional<depth::CameraIntrinsics> k;
      if (!enc_intr.empty()) k = depth::load_intrinsics(enc_intr);
      const auto format = depth::depth_format_from_string(enc_format);
      fs::create_directories(enc_out);
      std::size_t n = 0;
      for (const auto& p : data::sorted_children(enc_in, false)) {
        if (p.extension() != ".png") continue;
        auto d = io::depth_from_png(read_file(p));
        data::DepthSettings ds;
        ds.intrinsics = k;
        auto img = depth::encode_depth(d, ds.intrinsics_for(d.width, d.height), format, enc_dmax, enc_window);
        write_file(fs::path(enc_out) / p.filename(), io::png_from_image(img));
        ++n;
      }
      std::cerr << "encoded " << n << " depth images as " << enc_format << "\n";
    } else if (*train) {
      if (tr_precision == "f64") return run_train<double>(tr, tr_spec, tr_out, tr_cfg);
      return run_train<float>(tr, tr_spec, tr_out, tr_cfg);
    } else if (*evalc) {
      if (ev_precision == "f64") return run_eval<double>(ev);
      return run_eval<float>(ev);
    } else if (*gen) {
      syn.dependence = data::dependence_from_string(syn_dep);
      auto idx = data::gen_synthetic(syn, syn_out);
      std::cerr << "wrote " << idx.entries.size() << " RGB-D pairs to " << syn_out << "\n";
    } else if (*rod) {
      auto idx = data::import_rod(rod_src, rod_dst, depth::depth_format_from_string(rod_format), rod_focal);
      std::cerr << "imported " << idx.entries.size() << " RGB-D pairs into " << rod_dst << "\n";
    } else if (*split) {
      data::SplitManifest m;
      if (sp_kind == "fewshot") {
        if (sp_base.empty()) throw InvalidArgument("--kind fewshot needs --base <manifest>");
        m = data::few_shot_split(data::load_split(sp_base), sp_shots, sp_seed);
      } else {
        if (sp_data.empty()) throw InvalidArgument("--kind " + sp_kind + " needs --data <root>");
        auto idx = data::scan(sp_data);
        if (sp_kind == "trial") {
          std::map<std::string, std::string> held;
          if (!sp_held.empty()) held = json::parse(read_text(sp_held)).get<std::map<std::string, std::string>>();
          m = data::trial_split(idx, sp_seed, held);
        } else {
          m = data::kfold_split(idx, sp_k, sp_fold, sp_seed);
        }
      }
      data::save_split(sp_out, m);
      std::cerr << "split " << m.kind << ": " << m.train.size() << " train, " << m.test.size() << " test\n";
    } else if (*knn || *lin) {
      const Common& o = *knn ? kn : li;
      auto idx = data::scan(o.data);
      auto sp = split_or_all(idx, o.split);
      auto m = model_for<float>(o.checkpoint, o.fusion, o.late_op, o.seed);
      eval::require_frozen_regime(m);
      const auto fp = fusion::fingerprint(m);
      auto trs = samples_of<float>(idx, sp.train, m.spec.base.image_size, o.threads);
      auto tes = samples_of<float>(idx, sp.test, m.spec.base.image_size, o.threads);
      auto ftr = eval::cached_features<float>(feature_cache(o.split, fp, "train"), trs, m, o.threads);
      auto fte = eval::cached_features<float>(feature_cache(o.split, fp, "test"), tes, m, o.threads);
      eval::EvalReport r;
      if (*knn) {
        r = eval::knn_eval(ftr, fte, kn_k, idx.categories.size(), idx.categories, o.threads);
      } else {
        li_cfg.seed = o.seed;
        r = eval::linear_eval(ftr, fte, idx.categories.size(), li_cfg, idx.categories);
      }
      json j = r;
      j["config"]["fusion"] = m.spec.label();
      j["config"]["checkpoint"] = o.checkpoint;
      emit(j, o.report);
    } else if (*fine) {
      if (ft_profile == "variant") {
        auto v = eval::FinetuneConfig::variant();
        if (!ft_lr->count()) ft_cfg.lr = v.lr;
        if (!ft_batch->count()) ft_cfg.batch = v.batch;
      }
      auto idx = data::scan(ft.data);
      auto sp = split_or_all(idx, ft.split);
      auto ck = nn::load_checkpoint<float>(ft.checkpoint);
      auto have = fusion::spec_of(ck);
      auto want = fusion_from_flags(have, ft.fusion, ft.late_op);
      want.base.num_classes = idx.categories.size();
      auto m = (want.mode == have.mode && want.late_op == have.late_op) ? fusion::model_from_checkpoint(std::move(ck))
                                                                         : fusion::init_from_rgb_checkpoint(ck, want, ft.seed);
      m.spec.base.num_classes = idx.categories.size();
      auto trs = samples_of<float>(idx, sp.train, m.spec.base.image_size, ft.threads);
      auto tes = samples_of<float>(idx, sp.test, m.spec.base.image_size, ft.threads);
      ft_cfg.seed = ft.seed;
      ft_cfg.threads = ft.threads;
      auto res = eval::finetune<float>(std::move(m), trs, tes, ft_cfg, idx.categories);
      if (!ft_out.empty()) fusion::save_model(ft_out, res.model);
      json j = res.report;
      j["config"]["profile"] = ft_profile;
      if (!ft_out.empty()) j["checkpoint"] = ft_out;
      emit(j, ft.report);
    } else if (*transfer) {
      auto idx = data::scan(tf.data);
      auto sp = split_or_all(idx, tf.split);
      auto ck = nn::load_checkpoint<float>(tf.checkpoint);
      eval::TransferConfig cfg;
      cfg.finetune = tf_cfg;
      cfg.finetune.seed = tf.seed;
      cfg.finetune.threads = tf.threads;
      cfg.seed = tf.seed;
      cfg.target_only = !tf_no_ceiling;
      cfg.shots.clear();
      for (const auto& s : split_list(tf_shots)) cfg.shots.push_back(std::stoul(s));
      for (const auto& mlabel : split_list(tf_modes)) cfg.modes.push_back(fusion_from_label(fusion::spec_of(ck), mlabel));
      auto trs = samples_of<float>(idx, sp.train, ck.spec.image_size, tf.threads);
      auto tes = samples_of<float>(idx, sp.test, ck.spec.image_size, tf.threads);
      auto rows = eval::transfer_experiment<float>(ck, trs, tes, idx.categories.size(), cfg, idx.categories);
      json j = {{"source", tf.checkpoint}, {"rows", rows}, {"config", cfg.finetune}};
      j["config"]["shots"] = cfg.shots;
      j["config"]["seed"] = cfg.seed;
      for (const auto& r : rows)
        std::cerr << r.mode << "\t" << r.source << "\tshots " << r.shots << "\ttop1 " << r.report.top1 << "\n";
      emit(j, tf.report);
    } else if (*proto) {
      auto idx = data::scan(pr.data);
      std::vector<std::string> ids = pr.split.empty() ? idx.ids() : data::load_split(pr.split).test;
      auto m = model_for<float>(pr.checkpoint, pr.fusion, pr.late_op, pr.seed);
      auto samples = samples_of<float>(idx, ids, m.spec.base.image_size, pr.threads);
      auto table = eval::extract_features<float>(samples, m, pr.threads);
      std::map<std::string, std::size_t> row_of;
      for (std::size_t r = 0; r < table.rows(); ++r) row_of[table.ids[r]] = r;
      lifelong::Extractor extractor = [&](const std::string& id) {
        auto it = row_of.find(id);
        if (it == row_of.end()) throw NotFound("no features for '" + id + "'");
        return std::vector<float>(table.row(it->second), table.row(it->second) + table.width);
      };
      pr_cfg.seed = pr.seed;
      auto ds = lifelong::protocol_dataset(idx, ids);
      auto reports = lifelong::run_many(ds, extractor, pr_cfg, pr_runs, pr.threads ? pr.threads : 1);
      auto agg = lifelong::aggregate(reports);
      json j = {{"extractor", pr.checkpoint}, {"fusion", m.spec.label()}, {"config", pr_cfg}, {"aggregate", agg}, {"runs", reports}};
      std::cout << lifelong::format_table(agg);
      if (!pr.report.empty()) emit(j, pr.report);
    } else if (*serve) {
      sv.checkpoint = sv_ckpt;
      sv.data_dir = sv_data;
      teachd::TeachService service(sv);
      httplib::Server srv;
      teachd::mount(srv, service);
      g_server = &srv;
      g_service = &service;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "teachd listening on " << sv_host << ":" << sv_port << "\n";
      if (!srv.listen(sv_host, sv_port)) throw IoError("cannot listen on " + sv_host + ":" + std::to_string(sv_port));
      g_server = nullptr;
      g_service = nullptr;
    }
  } catch (const Error& e) {
    std::cerr << "error [" << e.code() << "]: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
