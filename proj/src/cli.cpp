// SPDX-License-Identifier: Apache-2.0

#include <condnet/analysis.hpp>
#include <condnet/cli.hpp>
#include <condnet/cost.hpp>
#include <condnet/ensemble.hpp>
#include <condnet/io.hpp>
#include <condnet/search.hpp>
#include <condnet/trainer.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <functional>
#include <ostream>
#include <sstream>

namespace condnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t parse_count(const std::string &text, const std::string &what) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception &) {
    pos = 0;
  }
  if (pos == 0 || pos != text.size())
    throw ArgumentError(what + ": expected a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

} // namespace

Dataset load_data_spec(const std::string &spec, std::uint64_t seed, std::size_t limit) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "cifar10") {
    const fs::path path = arg.empty() ? data_directory() : fs::path(arg);
    if (path.empty())
      throw DataError("cifar10 needs a path (cifar10:PATH) or CONDNET_DATA");
    return load_cifar10(path, limit);
  }
  if (kind == "two_clusters" || kind == "block_classes") {
    if (arg.empty())
      throw ArgumentError("synthetic data needs a size, e.g. " + kind + ":200");
    return gen_synthetic(parse_synthetic_kind(kind), parse_count(arg, "dataset size"), seed);
  }
  throw ArgumentError("unknown dataset '" + spec +
                      "' (two_clusters:N, block_classes:N, cifar10[:PATH])");
}

RoutingPolicy parse_policy(const std::string &text, bool renormalize) {
  if (text == "soft")
    return RoutingPolicy::soft();
  if (text == "hard")
    return RoutingPolicy::hard();
  if (text.rfind("top:", 0) == 0)
    return RoutingPolicy::top(parse_count(text.substr(4), "tau"), renormalize);
  throw ArgumentError("unknown routing policy '" + text + "' (soft, hard, top:K)");
}

namespace {

struct Options {
  // shared
  std::size_t threads = 1;
  std::uint64_t seed = 7;
  std::string precision = "f32";
  std::string out = "condnet-run";
  // data
  std::string data;
  long val = -1;
  long test = -1;
  std::size_t limit = 7000;
  // training
  double lr0 = 0.05;
  double weight_decay = 1e-4;
  std::size_t batch = 32;
  std::size_t epochs = 20;
  double momentum = 0.9;
  std::size_t plateau_window = 0;
  double drop_factor = 10.0;
  std::size_t max_drops = 2;
  std::string loss = "cross_entropy";
  bool augment = false;
  bool no_early_stop = false;
  std::string init;
  // model and routing
  std::string arch;
  std::string ckpt;
  std::string policy = "soft";
  bool no_renorm = false;
  std::string subset = "test";
  std::string analyze_subset = "all";
  std::string taus;
  bool breakdown = false;
  // search
  std::string space;
  std::string driver = "exhaustive";
  std::size_t budget = 8;
  // ensemble
  std::string spec;
  std::string thetas = "0:1:11";
  // analyze
  std::string layer_i;
  std::string layer_j;
  std::size_t blocks = 2;
  // rerun
  std::string manifest;

  TrainConfig train_config() const {
    TrainConfig c;
    c.lr0 = lr0;
    c.weight_decay = weight_decay;
    c.batch = batch;
    c.max_epochs = epochs;
    c.momentum = momentum;
    c.plateau_window = plateau_window;
    c.drop_factor = drop_factor;
    c.max_drops = max_drops;
    c.loss = parse_loss(loss);
    c.augment = augment;
    c.early_stop = !no_early_stop;
    c.seed = seed;
    c.threads = threads;
    c.check();
    return c;
  }
};

class Run {
public:
  Run(const std::string &command, const Options &o, const CLI::App &sub)
      : dir_(o.out) {
    manifest_.command = command;
    manifest_.seed = o.seed;
    manifest_.precision = o.precision;
    for (const CLI::Option *opt : sub.get_options()) {
      const std::string name = opt->get_name();
      if (name == "--help" || name == "--out")
        continue;
      std::string value;
      if (opt->get_expected_max() == 0)
        value = opt->count() ? "true" : "false";
      else if (opt->count())
        value = opt->results().front();
      else
        value = opt->get_default_str();
      if (!value.empty())
        manifest_.config[name] = value;
    }
  }

  const fs::path &dir() const { return dir_; }

  void emit(const std::string &name, std::string_view text) {
    write_text(dir_ / name, text);
    manifest_.outputs.push_back(name);
  }

  template <typename T>
  void checkpoint(const std::string &name, const ArchSpec &arch, const ParamStore<T> &p,
                  std::size_t iteration) {
    save_checkpoint(dir_ / name, arch, p, iteration);
    manifest_.outputs.push_back(name + "/");
  }

  void emit_tensor(const std::string &name, const Tensor<double> &t) {
    save_tensor(dir_ / name, t);
    manifest_.outputs.push_back(name);
  }

  void finish() { write_text(dir_ / "manifest.json", manifest_.to_json()); }

private:
  fs::path dir_;
  RunManifest manifest_;
};

struct Context {
  const Options &o;
  Run &run;
  std::ostream &out;
  std::ostream &err;
};

SplitSpec split_for(const Dataset &d, const Options &o) {
  const bool cifar = o.data.rfind("cifar10", 0) == 0;
  const std::size_t fallback = cifar ? 1000 : d.size() / 5;
  const std::size_t nv = o.val < 0 ? fallback : static_cast<std::size_t>(o.val);
  const std::size_t nt = o.test < 0 ? fallback : static_cast<std::size_t>(o.test);
  return make_split(d.size(), nv, nt, o.seed);
}

Dataset pick(const Dataset &d, const SplitSpec &s, const std::string &which) {
  if (which == "all")
    return d;
  const std::vector<std::size_t> &idx =
      which == "train" ? s.train : which == "val" ? s.val : s.test;
  if (idx.empty())
    throw ArgumentError("the " + which + " split is empty");
  return d.subset(idx);
}

std::string metrics_csv(const std::vector<std::pair<std::string, std::string>> &rows) {
  std::string s = "metric,value\n";
  for (const auto &[k, v] : rows)
    s += k + ',' + v + '\n';
  return s;
}

template <typename T> Checkpoint<T> checkpoint_for(const Options &o) {
  Checkpoint<T> ck = load_checkpoint<T>(o.ckpt);
  if (!o.arch.empty() && !(load_arch(o.arch) == ck.arch))
    throw ConfigError("--arch '" + o.arch + "' differs from the checkpoint architecture");
  return ck;
}

std::vector<std::size_t> parse_taus(const std::string &text, std::size_t R) {
  auto value = [&](const std::string &s) {
    return s == "R" ? R : parse_count(s, "tau");
  };
  std::vector<std::size_t> out;
  const auto dots = text.find("..");
  if (dots != std::string::npos) {
    const std::size_t a = value(text.substr(0, dots)), b = value(text.substr(dots + 2));
    if (a > b)
      throw ArgumentError("empty tau range '" + text + "'");
    for (std::size_t t = a; t <= b; ++t)
      out.push_back(t);
    return out;
  }
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');)
    out.push_back(value(item));
  return out;
}

std::vector<double> parse_thetas(const std::string &text) {
  std::vector<double> out;
  auto number = [&](const std::string &s) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &pos);
    } catch (const std::exception &) {
      pos = 0;
    }
    if (pos == 0 || pos != s.size())
      throw ArgumentError("bad theta value '" + s + "'");
    return v;
  };
  std::vector<std::string> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ':');)
    parts.push_back(item);
  if (parts.size() == 3) {
    const double a = number(parts[0]), b = number(parts[1]);
    const std::size_t n = parse_count(parts[2], "theta count");
    if (n < 2)
      throw ArgumentError("a theta grid needs at least 2 points");
    for (std::size_t i = 0; i < n; ++i)
      out.push_back(i + 1 == n ? b : a + (b - a) * double(i) / double(n - 1));
    return out;
  }
  std::stringstream cs(text);
  for (std::string item; std::getline(cs, item, ',');)
    out.push_back(number(item));
  return out;
}

// ---- commands ----------------------------------------------------------------------

template <typename T> void cmd_train(Context &c) {
  const Options &o = c.o;
  const ArchSpec arch = load_arch(o.arch);
  const Graph g(arch);
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const SplitSpec split = split_for(d, o);
  ParamStore<T> init;
  if (!o.init.empty()) {
    Checkpoint<T> ck = load_checkpoint<T>(o.init);
    if (!(ck.arch == arch))
      throw ConfigError("--init checkpoint has a different architecture");
    init = std::move(ck.params);
  }
  TrainResult<T> r = train<T>(g, d, split, o.train_config(), o.init.empty() ? nullptr : &init);
  c.run.checkpoint("ckpt", arch, r.params, r.iterations);
  c.run.emit("history.csv", r.history_csv());

  std::vector<std::pair<std::string, std::string>> m = {
      {"iterations", std::to_string(r.iterations)},
      {"lr_drops", std::to_string(r.drops)},
      {"stopped_early", r.stopped_early ? "1" : "0"},
      {"static_macs", std::to_string(static_cost(g).total_macs)},
      {"params", std::to_string(param_count(g))}};
  if (!r.history.empty())
    m.push_back({"final_val_acc", format_double(r.history.back().val_acc)});
  if (!split.test.empty()) {
    const EvalResult<T> ev =
        evaluate(g, r.params, d.subset(split.test), parse_policy(o.policy, !o.no_renorm),
                 64, o.threads);
    m.push_back({"test_accuracy", format_double(ev.accuracy)});
    c.out << "test accuracy " << ev.accuracy << " after " << r.iterations
          << " iterations\n";
  }
  c.run.emit("summary.csv", metrics_csv(m));
}

template <typename T> void cmd_eval(Context &c) {
  const Options &o = c.o;
  Checkpoint<T> ck = checkpoint_for<T>(o);
  const Graph g(ck.arch);
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const Dataset sub = pick(d, split_for(d, o), o.subset);
  const EvalResult<T> ev = evaluate(g, ck.params, sub, parse_policy(o.policy, !o.no_renorm),
                                    64, o.threads);
  const CostReport cost = amortized_cost(g, ev.visited);
  c.run.emit("eval.csv", metrics_csv({{"samples", std::to_string(sub.size())},
                                      {"accuracy", format_double(ev.accuracy)},
                                      {"error", format_double(ev.error())},
                                      {"amortized_macs", format_double(cost.amortized_macs)},
                                      {"static_macs", std::to_string(cost.total_macs)},
                                      {"params", std::to_string(cost.total_params)}}));
  std::string preds = "index,label,predicted\n";
  for (std::size_t i = 0; i < sub.size(); ++i)
    preds += std::to_string(i) + ',' + std::to_string(sub.labels[i]) + ',' +
             std::to_string(ev.predictions[i]) + '\n';
  c.run.emit("predictions.csv", preds);
  c.out << "accuracy " << ev.accuracy << ", amortized MACs " << cost.amortized_macs << '\n';
}

template <typename T> void cmd_sweep_tau(Context &c) {
  const Options &o = c.o;
  Checkpoint<T> ck = checkpoint_for<T>(o);
  const Graph g(ck.arch);
  const std::size_t R = max_router_routes(g);
  if (R == 0)
    throw ConfigError("the architecture has no router to sweep");
  const std::vector<std::size_t> taus = parse_taus(o.taus.empty() ? "1..R" : o.taus, R);
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const Dataset sub = pick(d, split_for(d, o), o.subset);
  const auto pts = sweep_tau(g, ck.params, sub, taus, !o.no_renorm, o.threads);
  const std::string csv = tau_curve_csv(pts, param_count(g));
  c.run.emit("curve.csv", csv);
  c.out << csv;
}

template <typename T> void cmd_cost(Context &c) {
  const Options &o = c.o;
  if (o.arch.empty() && o.ckpt.empty())
    throw ArgumentError("cost needs --arch or --ckpt");
  CostReport rep;
  Graph g(o.ckpt.empty() ? load_arch(o.arch) : checkpoint_for<T>(o).arch);
  if (!o.data.empty()) {
    if (o.ckpt.empty())
      throw ArgumentError("amortized cost needs --ckpt with --data");
    Checkpoint<T> ck = checkpoint_for<T>(o);
    const Dataset d = load_data_spec(o.data, o.seed, o.limit);
    const Dataset sub = pick(d, split_for(d, o), o.subset);
    rep = amortized_cost(g, ck.params, sub.images.template cast<T>(),
                         parse_policy(o.policy, !o.no_renorm), 64, o.threads);
  } else {
    rep = static_cost(g);
  }
  c.run.emit("cost.csv", rep.to_csv());
  c.run.emit("cost.json", rep.to_json());
  if (o.breakdown) {
    std::string bars = "label,macs\n";
    for (const LayerBar &b : layer_breakdown(g))
      bars += b.label + ',' + format_double(b.macs) + '\n';
    c.run.emit("layers.csv", bars);
  }
  c.out << rep.to_csv();
}

template <typename T> void cmd_search(Context &c) {
  const Options &o = c.o;
  const SearchSpace space = search_space_from_json(read_text(o.space));
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const SplitSpec split = split_for(d, o);
  if (split.test.empty())
    throw ArgumentError("search scores configurations on the test split; --test is 0");
  TrainConfig cfg = o.train_config();
  cfg.threads = 1; // configurations run in parallel instead
  const Dataset scored = d.subset(split.test);
  const TrainEval te = [&](const ArchSpec &arch, const SearchConfig &) {
    const Graph g(arch);
    TrainResult<T> r = train<T>(g, d, split, cfg);
    return evaluate(g, r.params, scored).accuracy;
  };
  SearchOptions so;
  if (o.driver == "exhaustive")
    so.driver = SearchDriver::Exhaustive;
  else if (o.driver == "random")
    so.driver = SearchDriver::Random;
  else
    throw ArgumentError("unknown search driver '" + o.driver + "'");
  so.budget = o.budget;
  so.seed = o.seed;
  so.threads = o.threads;
  std::vector<std::string> warnings;
  const std::vector<SearchResult> res = search(space, so, te, &warnings);
  for (const std::string &w : warnings)
    c.err << "warning: " << w << '\n';
  c.run.emit("search.csv", search_log_csv(res));
  c.run.emit("best_arch.json", arch_to_json(res.front().arch));
  c.out << "best " << res.front().config.label() << " accuracy " << res.front().accuracy
        << " params " << res.front().params << '\n';
}

template <typename T>
Ensemble<T> load_ensemble(const fs::path &spec_path, std::uint64_t seed,
                          bool need_router_ckpt) {
  const fs::path base = spec_path.parent_path();
  auto resolve = [&](const std::string &p) {
    return fs::path(p).is_absolute() ? fs::path(p) : base / p;
  };
  try {
    const json j = json::parse(read_text(spec_path));
    std::vector<Expert<T>> experts;
    for (const json &e : j.at("experts")) {
      Checkpoint<T> ck = load_checkpoint<T>(resolve(e.at("ckpt").get<std::string>()));
      experts.push_back({e.at("name").get<std::string>(), Graph(ck.arch),
                         std::move(ck.params), e.value("oversample", std::size_t(1))});
    }
    const json &r = j.at("router");
    Graph router(load_arch(resolve(r.at("arch").get<std::string>())));
    ParamStore<T> router_params;
    if (r.contains("ckpt")) {
      Checkpoint<T> ck = load_checkpoint<T>(resolve(r["ckpt"].get<std::string>()));
      if (!(ck.arch == router.spec()))
        throw ConfigError("router checkpoint does not match the router architecture");
      router_params = std::move(ck.params);
    } else if (need_router_ckpt) {
      throw ConfigError("ensemble spec has no trained router checkpoint");
    } else {
      router_params = init_params<T>(router, seed);
    }
    Ensemble<T> ens{std::move(experts), std::move(router), std::move(router_params),
                    r.value("shared", std::string())};
    ens.check();
    return ens;
  } catch (const json::exception &e) {
    throw FormatError(spec_path.string() + ": " + e.what());
  }
}

template <typename T> void cmd_ensemble_train(Context &c) {
  const Options &o = c.o;
  const fs::path spec_path = o.spec;
  Ensemble<T> ens = load_ensemble<T>(spec_path, o.seed, false);
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const SplitSpec split = split_for(d, o);
  TrainResult<T> r = train_router(ens, d, split, o.train_config(), o.threads);
  c.run.checkpoint("router", ens.router.spec(), ens.router_params, r.iterations);
  c.run.emit("router_arch.json", arch_to_json(ens.router.spec()));
  c.run.emit("history.csv", r.history_csv());

  const json src = json::parse(read_text(spec_path));
  json spec;
  spec["experts"] = json::array();
  for (const json &e : src.at("experts")) {
    json copy = e;
    const fs::path p = e.at("ckpt").get<std::string>();
    copy["ckpt"] = fs::weakly_canonical(p.is_absolute() ? p : spec_path.parent_path() / p)
                       .string();
    spec["experts"].push_back(copy);
  }
  spec["router"] = {{"arch", "router_arch.json"}, {"ckpt", "router"}};
  if (!ens.shared_node.empty())
    spec["router"]["shared"] = ens.shared_node;
  c.run.emit("ensemble.json", spec.dump(2) + "\n");
  c.out << "router trained for " << r.iterations << " iterations\n";
}

template <typename T> void cmd_ensemble_sweep(Context &c) {
  const Options &o = c.o;
  const Ensemble<T> ens = load_ensemble<T>(o.spec, o.seed, true);
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const Dataset sub = pick(d, split_for(d, o), o.subset);
  const EnsembleOutputs<T> outs = precompute(ens, sub.images, o.threads);
  const std::vector<EnsemblePoint> curve =
      sweep_curve(ens, outs, sub.labels, parse_thetas(o.thetas));

  std::vector<EnsemblePoint> solo;
  std::string experts = "name,error,cost\n";
  for (std::size_t e = 0; e < ens.experts.size(); ++e) {
    const auto pred = argmax_rows(outs.posteriors[e]);
    std::size_t wrong = 0;
    for (std::size_t i = 0; i < sub.size(); ++i)
      wrong += pred[i] != sub.labels[i];
    solo.push_back({0.0, double(wrong) / double(sub.size()), double(ens.experts[e].cost())});
    experts += ens.experts[e].name + ',' + format_double(solo.back().error) + ',' +
               format_double(solo.back().cost) + '\n';
  }
  const auto order = ens.cost_order();
  std::vector<double> ps;
  for (std::size_t i = 0; i <= 10; ++i)
    ps.push_back(double(i) / 10.0);
  c.run.emit("curve.csv", curve_csv(curve));
  c.run.emit("baseline.csv",
             baseline_csv(baseline_curve(solo[order.front()], solo[order.back()], ps)));
  c.run.emit("experts.csv", experts);
  c.out << curve_csv(curve);
}

template <typename T> void cmd_analyze(Context &c) {
  const Options &o = c.o;
  Checkpoint<T> ck = checkpoint_for<T>(o);
  const Graph g(ck.arch);
  const Dataset d = load_data_spec(o.data, o.seed, o.limit);
  const Dataset sub = pick(d, split_for(d, o), o.analyze_subset);
  const CorrelationMatrix cm = activation_correlation(g, ck.params, sub, o.layer_i, o.layer_j);
  const BlockOrdering ord = reorder_block_diagonal(cm.lambda, o.blocks);
  const ZeroedBlocks z = zero_off_diagonal(cm.lambda, ord);
  c.run.emit_tensor("correlation.bin", cm.lambda);
  c.run.emit("correlation.csv", matrix_csv(cm.lambda));
  c.run.emit("reordered.csv", matrix_csv(permute(cm.lambda, ord)));
  auto assignment = [](const std::vector<std::size_t> &perm,
                       const std::vector<std::size_t> &block) {
    std::string s = "position,unit,block\n";
    for (std::size_t p = 0; p < perm.size(); ++p)
      s += std::to_string(p) + ',' + std::to_string(perm[p]) + ',' +
           std::to_string(block[perm[p]]) + '\n';
    return s;
  };
  c.run.emit("rows.csv", assignment(ord.row_perm, ord.row_block));
  c.run.emit("cols.csv", assignment(ord.col_perm, ord.col_block));
  c.run.emit("blocks.csv",
             metrics_csv({{"layer_i", cm.layer_i},
                          {"layer_j", cm.layer_j},
                          {"samples", std::to_string(cm.samples)},
                          {"blocks", std::to_string(o.blocks)},
                          {"retained_fraction", format_double(z.retained_fraction)}}));

  // A dense fc reading layer_i directly can be replaced by its routed form.
  const NodeSpec &nj = g.node(o.layer_j);
  if (nj.kind == NodeKind::Transform && nj.layer.kind == LayerKind::FullyConnected &&
      nj.inputs.front() == o.layer_i) {
    const ArchSpec routed = routed_perceptron(z, shape_numel(g.shape(o.layer_i)),
                                              nj.layer.act, nj.layer.bias);
    const ParamStore<T> rp =
        routed_params_from_dense(z, ck.params.at(param_id(nj.id)).value, nj.layer.bias);
    c.run.checkpoint("routed", routed, rp, 0);
  }
  c.out << "retained " << z.retained_fraction << " of |correlation| mass in "
        << z.row_groups.size() << " blocks\n";
}

// ---- parser ------------------------------------------------------------------------

struct Command {
  CLI::App *app;
  std::function<void(Context &)> f32;
  std::function<void(Context &)> f64;
};

void add_shared(CLI::App *s, Options &o) {
  s->add_option("--threads", o.threads, "worker threads (1 = serial reference mode)")
      ->check(CLI::PositiveNumber);
  s->add_option("--seed", o.seed, "seed for every random draw");
  s->add_option("--precision", o.precision, "f32 or f64")
      ->check(CLI::IsMember({"f32", "f64"}));
  s->add_option("--out", o.out, "run directory");
}

void add_data(CLI::App *s, Options &o, bool required) {
  s->add_option("--data", o.data, "two_clusters:N | block_classes:N | cifar10[:PATH]")
      ->required(required);
  s->add_option("--val", o.val, "validation images (default 1000 for cifar10, N/5 otherwise)");
  s->add_option("--test", o.test, "test images (default 1000 for cifar10, N/5 otherwise)");
  s->add_option("--limit", o.limit, "cifar10 records to load");
}

void add_training(CLI::App *s, Options &o) {
  s->add_option("--lr", o.lr0, "initial learning rate");
  s->add_option("--weight-decay", o.weight_decay);
  s->add_option("--batch", o.batch)->check(CLI::PositiveNumber);
  s->add_option("--epochs", o.epochs)->check(CLI::PositiveNumber);
  s->add_option("--momentum", o.momentum);
  s->add_option("--plateau-window", o.plateau_window,
                "iterations between plateau checks (0 disables)");
  s->add_option("--drop-factor", o.drop_factor);
  s->add_option("--max-drops", o.max_drops);
  s->add_option("--loss", o.loss)
      ->check(CLI::IsMember({"cross_entropy", "squared_error", "sigmoid_cross_entropy"}));
  s->add_flag("--augment", o.augment, "random shifts and mirroring");
  s->add_flag("--no-early-stop", o.no_early_stop);
}

void add_policy(CLI::App *s, Options &o) {
  s->add_option("--policy", o.policy, "soft | hard | top:K");
  s->add_flag("--no-renorm", o.no_renorm, "keep truncated router weights unnormalized");
}

void add_subset(CLI::App *s, std::string &target) {
  s->add_option("--subset", target)->check(CLI::IsMember({"train", "val", "test", "all"}));
}

template <template <typename> class F> Command bind(CLI::App *app) {
  return {app, [](Context &c) { F<float>::run(c); }, [](Context &c) { F<double>::run(c); }};
}

#define CONDNET_COMMAND(Name, fn)                                                      \
  template <typename T> struct Name {                                                  \
    static void run(Context &c) { fn<T>(c); }                                          \
  };
CONDNET_COMMAND(TrainCmd, cmd_train)
CONDNET_COMMAND(EvalCmd, cmd_eval)
CONDNET_COMMAND(SweepCmd, cmd_sweep_tau)
CONDNET_COMMAND(CostCmd, cmd_cost)
CONDNET_COMMAND(SearchCmd, cmd_search)
CONDNET_COMMAND(EnsTrainCmd, cmd_ensemble_train)
CONDNET_COMMAND(EnsSweepCmd, cmd_ensemble_sweep)
CONDNET_COMMAND(AnalyzeCmd, cmd_analyze)
#undef CONDNET_COMMAND

std::vector<Command> build(CLI::App &app, Options &o) {
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  std::vector<Command> cmds;

  CLI::App *s = app.add_subcommand("train", "train a network from an architecture file");
  add_shared(s, o);
  s->add_option("--arch", o.arch)->required()->check(CLI::ExistingFile);
  s->add_option("--init", o.init, "start from this checkpoint");
  add_data(s, o, true);
  add_training(s, o);
  add_policy(s, o);
  cmds.push_back(bind<TrainCmd>(s));

  s = app.add_subcommand("eval", "error and amortized cost of a checkpoint");
  add_shared(s, o);
  s->add_option("--ckpt", o.ckpt)->required();
  s->add_option("--arch", o.arch, "must match the checkpoint")->check(CLI::ExistingFile);
  add_data(s, o, true);
  add_policy(s, o);
  add_subset(s, o.subset);
  cmds.push_back(bind<EvalCmd>(s));

  s = app.add_subcommand("sweep-tau", "error-cost curve over top-tau routing");
  add_shared(s, o);
  s->add_option("--ckpt", o.ckpt)->required();
  s->add_option("--arch", o.arch, "must match the checkpoint")->check(CLI::ExistingFile);
  s->add_option("--taus", o.taus, "A..B or a comma list; R is the router width");
  s->add_flag("--no-renorm", o.no_renorm);
  add_data(s, o, true);
  add_subset(s, o.subset);
  cmds.push_back(bind<SweepCmd>(s));

  s = app.add_subcommand("cost", "per-node MACs and parameters");
  add_shared(s, o);
  s->add_option("--arch", o.arch)->check(CLI::ExistingFile);
  s->add_option("--ckpt", o.ckpt, "with --data: amortized cost under --policy");
  s->add_flag("--breakdown", o.breakdown, "also write per-layer totals");
  add_data(s, o, false);
  add_policy(s, o);
  add_subset(s, o.subset);
  cmds.push_back(bind<CostCmd>(s));

  s = app.add_subcommand("search", "route/filter search by size-normalized accuracy");
  add_shared(s, o);
  s->add_option("--space", o.space)->required()->check(CLI::ExistingFile);
  s->add_option("--driver", o.driver)->check(CLI::IsMember({"exhaustive", "random"}));
  s->add_option("--budget", o.budget, "configurations for the random driver");
  add_data(s, o, true);
  add_training(s, o);
  cmds.push_back(bind<SearchCmd>(s));

  s = app.add_subcommand("ensemble-train", "train an ensemble router on expert correctness");
  add_shared(s, o);
  s->add_option("--spec", o.spec)->required()->check(CLI::ExistingFile);
  add_data(s, o, true);
  add_training(s, o);
  cmds.push_back(bind<EnsTrainCmd>(s));

  s = app.add_subcommand("ensemble-sweep", "error-cost curve of a routed ensemble");
  add_shared(s, o);
  s->add_option("--spec", o.spec)->required()->check(CLI::ExistingFile);
  s->add_option("--thetas", o.thetas, "A:B:N grid or a comma list");
  add_data(s, o, true);
  add_subset(s, o.subset);
  cmds.push_back(bind<EnsSweepCmd>(s));

  s = app.add_subcommand("analyze", "activation correlation between two layers");
  add_shared(s, o);
  s->add_option("--ckpt", o.ckpt)->required();
  s->add_option("--arch", o.arch, "must match the checkpoint")->check(CLI::ExistingFile);
  s->add_option("--layer-i", o.layer_i)->required();
  s->add_option("--layer-j", o.layer_j)->required();
  s->add_option("--blocks", o.blocks, "diagonal blocks to recover")->check(CLI::PositiveNumber);
  add_data(s, o, true);
  add_subset(s, o.analyze_subset);
  cmds.push_back(bind<AnalyzeCmd>(s));

  s = app.add_subcommand("rerun", "replay a run manifest");
  s->add_option("--manifest", o.manifest)->required()->check(CLI::ExistingFile);
  s->add_option("--out", o.out, "run directory");
  cmds.push_back({s, nullptr, nullptr});
  return cmds;
}

std::vector<std::string> manifest_args(const RunManifest &m, const std::string &out) {
  Options scratch;
  CLI::App app;
  build(app, scratch);
  CLI::App *sub = app.get_subcommand(m.command);
  std::vector<std::string> args{"condnet", m.command};
  for (const auto &[key, value] : m.config) {
    const CLI::Option *opt = sub->get_option_no_throw(key);
    if (!opt)
      throw FormatError("manifest option '" + key + "' is unknown to " + m.command);
    if (opt->get_expected_max() == 0) {
      if (value == "true")
        args.push_back(key);
    } else {
      args.push_back(key);
      args.push_back(value);
    }
  }
  args.push_back("--out");
  args.push_back(out);
  return args;
}

} // namespace

int run_cli(int argc, const char *const *argv, std::ostream &out, std::ostream &err) {
  Options o;
  CLI::App app{"conditional networks: training, routing, cost and analysis", "condnet"};
  const std::vector<Command> cmds = build(app, o);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    for (const Command &cmd : cmds) {
      if (!cmd.app->parsed())
        continue;
      if (!cmd.f32) {
        const RunManifest m = RunManifest::from_json(read_text(o.manifest));
        if (m.engine_version != kEngineVersion)
          err << "warning: manifest from engine " << m.engine_version << ", running "
              << kEngineVersion << '\n';
        const std::vector<std::string> args = manifest_args(m, o.out);
        std::vector<const char *> ptrs;
        for (const std::string &a : args)
          ptrs.push_back(a.c_str());
        return run_cli(static_cast<int>(ptrs.size()), ptrs.data(), out, err);
      }
      Run run(cmd.app->get_name(), o, *cmd.app);
      Context ctx{o, run, out, err};
      (o.precision == "f64" ? cmd.f64 : cmd.f32)(ctx);
      run.finish();
      return 0;
    }
  } catch (const Error &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

} // namespace condnet
