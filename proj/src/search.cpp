// SPDX-License-Identifier: Apache-2.0

#include <condnet/search.hpp>

#include <json.hpp>

#include <algorithm>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

namespace condnet {

SearchSpace SearchSpace::powers_of_two(Shape input_shape, std::size_t classes,
                                       std::vector<FamilyLayer> layers,
                                       std::size_t route_exp_max,
                                       std::size_t filter_exp_max) {
  SearchSpace s;
  s.input_shape = std::move(input_shape);
  s.classes = classes;
  s.layers = std::move(layers);
  for (const FamilyLayer &l : s.layers) {
    std::vector<std::size_t> r, f;
    for (std::size_t i = 0; i <= route_exp_max; ++i)
      r.push_back(std::size_t(1) << i);
    for (std::size_t i = 0; i <= filter_exp_max; ++i)
      if (l.filters >> i)
        f.push_back(l.filters >> i);
    s.route_domain.push_back(std::move(r));
    s.filter_domain.push_back(std::move(f));
  }
  return s;
}

void SearchSpace::check() const {
  if (layers.empty())
    throw ArgumentError("search space has no layers");
  if (route_domain.size() != layers.size() || filter_domain.size() != layers.size())
    throw ArgumentError("search space needs one route and one filter domain per layer");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (route_domain[l].empty() || filter_domain[l].empty())
      throw ArgumentError("search space layer " + std::to_string(l) +
                          " has an empty domain");
    if (layers[l].kind != LayerKind::Conv &&
        layers[l].kind != LayerKind::FullyConnected)
      throw ArgumentError("family layers must be conv or fc");
  }
  if (classes == 0)
    throw ArgumentError("search space needs at least one class");
}

std::string SearchConfig::label() const {
  std::ostringstream os;
  os << "R=";
  for (std::size_t i = 0; i < routes.size(); ++i)
    os << (i ? "-" : "") << routes[i];
  os << ";F=";
  for (std::size_t i = 0; i < filters.size(); ++i)
    os << (i ? "-" : "") << filters[i];
  return os.str();
}

ArchSpec build_family_arch(const SearchSpace &space, const SearchConfig &config) {
  space.check();
  if (config.routes.size() != space.layers.size() ||
      config.filters.size() != space.layers.size())
    throw ArgumentError("configuration " + config.label() +
                        " does not match the number of layers");
  ArchSpec arch;
  arch.input_shape = space.input_shape;
  arch.route_counts = config.routes;
  std::string prev = kInputNode;
  Shape shape = space.input_shape;
  auto fail = [&](std::size_t l, const std::string &msg) {
    throw ValidationError("layer " + std::to_string(l) + " of " + config.label() +
                          ": " + msg);
  };
  bool flat = shape.size() == 1;
  for (std::size_t l = 0; l < space.layers.size(); ++l) {
    const FamilyLayer &fl = space.layers[l];
    const std::size_t R = config.routes[l], F = config.filters[l];
    if (R == 0 || F == 0)
      fail(l, "route and filter counts must be positive");
    const std::string base = "l" + std::to_string(l);
    if (fl.kind == LayerKind::Conv) {
      if (flat)
        fail(l, "conv layer after flat features");
      if (shape[0] % R || F % R)
        fail(l, std::to_string(R) + " routes do not divide " + std::to_string(shape[0]) +
                    " input channels and " + std::to_string(F) + " filters");
      NodeSpec n = make_conv(base + "_conv", prev, F, fl.kernel, R, fl.act);
      n.route_tag = RouteTag{l, 0};
      arch.nodes.push_back(n);
      prev = n.id;
      shape[0] = F;
      if (fl.pool_after) {
        NodeSpec p = make_pool(base + "_pool", prev, LayerKind::MaxPool, 2, 2);
        arch.nodes.push_back(p);
        prev = p.id;
        shape[1] /= 2;
        shape[2] /= 2;
      }
    } else {
      if (!flat) {
        NodeSpec g = make_pool(base + "_gmp", prev, LayerKind::GlobalMaxPool);
        arch.nodes.push_back(g);
        prev = g.id;
        shape = {shape[0]};
        flat = true;
      }
      const std::size_t m = shape[0];
      if (m % R || F % R)
        fail(l, std::to_string(R) + " routes do not divide " + std::to_string(m) +
                    " inputs and " + std::to_string(F) + " units");
      if (R == 1) {
        NodeSpec n = make_fc(base + "_fc", prev, F, fl.act);
        n.route_tag = RouteTag{l, 0};
        arch.nodes.push_back(n);
        prev = n.id;
      } else {
        std::vector<std::string> parts;
        for (std::size_t j = 0; j < R; ++j) {
          std::vector<std::size_t> idx(m / R);
          std::iota(idx.begin(), idx.end(), j * (m / R));
          NodeSpec s = make_selection(base + "_sel" + std::to_string(j), prev, idx);
          NodeSpec f = make_fc(base + "_fc" + std::to_string(j), s.id, F / R, fl.act);
          s.route_tag = f.route_tag = RouteTag{l, j};
          arch.nodes.push_back(s);
          arch.nodes.push_back(f);
          parts.push_back(f.id);
        }
        NodeSpec c = make_concat(base + "_cat", parts);
        arch.nodes.push_back(c);
        prev = c.id;
      }
      shape = {F};
    }
  }
  if (!flat) {
    NodeSpec g = make_pool("head_gmp", prev, LayerKind::GlobalMaxPool);
    arch.nodes.push_back(g);
    prev = g.id;
  }
  arch.nodes.push_back(make_fc("head_fc", prev, space.classes, Activation::Identity));
  arch.output = "head_fc";
  validate(arch);
  return arch;
}

std::vector<SearchConfig> enumerate(const SearchSpace &space) {
  space.check();
  const std::size_t L = space.layers.size();
  std::vector<std::size_t> radix;
  for (std::size_t l = 0; l < L; ++l)
    radix.push_back(space.route_domain[l].size());
  for (std::size_t l = 0; l < L; ++l)
    radix.push_back(space.filter_domain[l].size());
  std::vector<std::size_t> digit(radix.size(), 0);
  std::vector<SearchConfig> out;
  while (true) {
    SearchConfig c;
    for (std::size_t l = 0; l < L; ++l) {
      c.routes.push_back(space.route_domain[l][digit[l]]);
      c.filters.push_back(space.filter_domain[l][digit[L + l]]);
    }
    try {
      build_family_arch(space, c);
      out.push_back(std::move(c));
    } catch (const ValidationError &) {
      // Divisibility fails for this combination; it is not part of the space.
    }
    std::size_t pos = radix.size();
    while (pos > 0 && ++digit[pos - 1] == radix[pos - 1])
      digit[--pos] = 0;
    if (pos == 0)
      break;
  }
  if (out.empty())
    throw ArgumentError("search space contains no valid configuration");
  return out;
}

double alpha(double accuracy, std::uint64_t size) {
  if (size == 0)
    throw ArgumentError("size-normalized accuracy needs a positive model size");
  return accuracy / static_cast<double>(size);
}

std::vector<SearchResult> search(const SearchSpace &space, const SearchOptions &opt,
                                 const TrainEval &train_eval,
                                 std::vector<std::string> *warnings) {
  const std::vector<SearchConfig> all = enumerate(space);
  std::vector<std::size_t> chosen(all.size());
  std::iota(chosen.begin(), chosen.end(), 0);
  if (opt.driver == SearchDriver::Random) {
    std::size_t budget = opt.budget;
    if (budget > all.size()) {
      const std::string msg = "random search budget " + std::to_string(budget) +
                              " exceeds the space size " + std::to_string(all.size()) +
                              "; clamped";
      if (warnings)
        warnings->push_back(msg);
      else
        std::cerr << "warning: " << msg << '\n';
      budget = all.size();
    }
    std::mt19937_64 rng(opt.seed);
    std::shuffle(chosen.begin(), chosen.end(), rng);
    chosen.resize(budget);
    std::sort(chosen.begin(), chosen.end());
  }

  std::vector<SearchResult> results(chosen.size());
  parallel_for(chosen.size(), opt.threads, [&](std::size_t i) {
    SearchResult &r = results[i];
    r.config_id = chosen[i];
    r.config = all[chosen[i]];
    r.arch = build_family_arch(space, r.config);
    const Graph g(r.arch);
    const CostReport cost = static_cost(g);
    r.params = cost.total_params;
    r.macs = cost.total_macs;
    r.accuracy = train_eval(r.arch, r.config);
    r.alpha = alpha(r.accuracy, r.params);
  });
  std::stable_sort(results.begin(), results.end(),
                   [](const SearchResult &a, const SearchResult &b) {
                     return a.alpha > b.alpha;
                   });
  return results;
}

std::string search_log_csv(const std::vector<SearchResult> &results) {
  std::ostringstream os;
  os.precision(17);
  os << "config_id,routes,filters,accuracy,params,macs,alpha\n";
  auto join = [](const std::vector<std::size_t> &v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i)
      s += (i ? "-" : "") + std::to_string(v[i]);
    return s;
  };
  for (const SearchResult &r : results)
    os << r.config_id << ',' << join(r.config.routes) << ',' << join(r.config.filters)
       << ',' << r.accuracy << ',' << r.params << ',' << r.macs << ',' << r.alpha
       << '\n';
  return os.str();
}

std::string search_space_to_json(const SearchSpace &space) {
  nlohmann::json j;
  j["input_shape"] = space.input_shape;
  j["classes"] = space.classes;
  nlohmann::json layers = nlohmann::json::array();
  for (const FamilyLayer &l : space.layers)
    layers.push_back({{"type", layer_kind_name(l.kind)},
                      {"filters", l.filters},
                      {"kernel", l.kernel},
                      {"act", activation_name(l.act)},
                      {"pool_after", l.pool_after}});
  j["layers"] = layers;
  j["routes"] = space.route_domain;
  j["filters"] = space.filter_domain;
  return j.dump(2) + "\n";
}

SearchSpace search_space_from_json(const std::string &text) {
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    std::vector<FamilyLayer> layers;
    for (const auto &l : j.at("layers")) {
      FamilyLayer f;
      const std::string type = l.at("type").get<std::string>();
      if (type == "conv")
        f.kind = LayerKind::Conv;
      else if (type == "fc")
        f.kind = LayerKind::FullyConnected;
      else
        throw FormatError("family layer type must be conv or fc, got '" + type + "'");
      f.filters = l.at("filters").get<std::size_t>();
      f.kernel = l.value("kernel", std::size_t(3));
      f.act = parse_activation(l.value("act", std::string("relu")));
      f.pool_after = l.value("pool_after", false);
      layers.push_back(f);
    }
    SearchSpace s;
    if (j.contains("routes")) {
      s.input_shape = j.at("input_shape").get<Shape>();
      s.classes = j.at("classes").get<std::size_t>();
      s.layers = std::move(layers);
      s.route_domain = j.at("routes").get<std::vector<std::vector<std::size_t>>>();
      s.filter_domain = j.at("filters").get<std::vector<std::vector<std::size_t>>>();
    } else {
      s = SearchSpace::powers_of_two(j.at("input_shape").get<Shape>(),
                                     j.at("classes").get<std::size_t>(),
                                     std::move(layers),
                                     j.at("route_exp_max").get<std::size_t>(),
                                     j.at("filter_exp_max").get<std::size_t>());
    }
    s.check();
    return s;
  } catch (const nlohmann::json::exception &e) {
    throw FormatError(std::string("search space file: ") + e.what());
  }
}

} // namespace condnet
