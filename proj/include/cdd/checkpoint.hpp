#pragma once

// Line-oriented text checkpoint of a Learner: model parameters, head
// registry, trained tasks and exemplar memory. Numbers use %.17g, so a load
// restores every double exactly.

#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cdd/error.hpp"
#include "cdd/report.hpp"
#include "cdd/trainer.hpp"

namespace cdd {

inline constexpr const char* kCheckpointMagic = "cdd-checkpoint 1";

namespace detail {

inline void write_values(std::ostream& out, std::span<const double> v) {
  for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << format_double(v[i]);
  out << '\n';
}

inline void write_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  out << "tensor " << name << ' ' << t.rank();
  for (std::size_t d : t.shape()) out << ' ' << d;
  out << '\n';
  write_values(out, t.data());
}

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  std::istringstream next(const std::string& what) {
    std::string line;
    if (!std::getline(in_, line)) throw ParseError(line_ + 1, "unexpected end of checkpoint, expected " + what);
    ++line_;
    return std::istringstream(line);
  }

  std::size_t line() const { return line_; }

  [[noreturn]] void fail(const std::string& msg) const { throw ParseError(line_, msg); }

  void keyword(std::istringstream& s, const std::string& word) {
    std::string got;
    if (!(s >> got) || got != word) fail("expected '" + word + "'");
  }

  std::vector<double> values(std::size_t n) {
    auto s = next("values");
    std::vector<double> v(n);
    std::string tok;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(s >> tok) || !parse_number(std::string_view(tok), v[i])) fail("malformed or missing value");
    }
    if (s >> tok) fail("too many values");
    return v;
  }

  Tensor tensor(const std::string& name) {
    auto s = next("tensor " + name);
    keyword(s, "tensor");
    keyword(s, name);
    std::size_t rank = 0;
    if (!(s >> rank) || rank > 2) fail("bad tensor rank");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(s >> d)) fail("bad tensor shape");
    return Tensor(shape, values(shape_size(shape)));
  }

 private:
  std::istream& in_;
  std::size_t line_ = 0;
};

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const Learner& l) {
  const FeatureExtractor& ex = l.model.extractor();
  const ClassifierHead& head = l.model.head();
  out << kCheckpointMagic << '\n';
  out << "system " << to_string(l.system) << '\n';
  out << "head " << to_string(head.variant()) << '\n';
  out << "bias " << (ex.has_bias() ? 1 : 0) << '\n';
  out << "layers " << ex.num_layers() << '\n';
  out << "sessions " << l.sessions << '\n';
  out << "trained " << l.model.trained_tasks().size();
  for (int t : l.model.trained_tasks()) out << ' ' << t;
  out << '\n';
  out << "registry " << head.registry().size() << '\n';
  for (const auto& c : head.registry()) out << c.task << ' ' << static_cast<int>(c.polarity) << '\n';
  for (std::size_t k = 0; k < ex.num_layers(); ++k) {
    detail::write_tensor(out, "W" + std::to_string(k), ex.weight(k));
    detail::write_tensor(out, "b" + std::to_string(k), ex.bias(k));
  }
  detail::write_tensor(out, "theta", head.embeddings());
  detail::write_tensor(out, "head_bias", head.bias());
  out << "log_scale " << format_double(head.log_scale()) << '\n';
  if (!l.memory) {
    out << "memory none\n";
  } else {
    const ExemplarMemory& m = *l.memory;
    out << "memory " << m.budget() << ' ' << to_string(m.kind()) << ' ' << m.capture_layer() << ' '
        << m.classes().size() << '\n';
    for (const auto& [c, list] : m.classes()) {
      out << "class " << c << ' ' << list.size() << '\n';
      for (const auto& e : list) {
        out << e.task << ' ' << static_cast<int>(e.polarity) << ' ' << e.payload.size() << '\n';
        detail::write_values(out, e.payload);
      }
    }
  }
  out << "end\n";
}

inline Learner load_checkpoint(std::istream& in) {
  detail::LineReader r(in);
  {
    std::string line;
    auto s = r.next("header");
    std::getline(s, line);
    if (line != kCheckpointMagic) r.fail("not a checkpoint (bad header)");
  }
  auto word_after = [&](const std::string& key) {
    auto s = r.next(key);
    r.keyword(s, key);
    std::string v;
    if (!(s >> v)) r.fail("missing value for " + key);
    return v;
  };
  auto count_after = [&](const std::string& key) {
    const std::string v = word_after(key);
    std::size_t n = 0;
    if (!detail::parse_number(std::string_view(v), n)) r.fail("malformed count for " + key);
    return n;
  };

  Learner l;
  try {
    l.system = parse_system(word_after("system"));
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  HeadVariant variant{};
  try {
    variant = parse_head_variant(word_after("head"));
  } catch (const ConfigError& e) {
    r.fail(e.what());
  }
  const bool bias = count_after("bias") != 0;
  const std::size_t layers = count_after("layers");
  if (layers == 0) r.fail("extractor needs at least one layer");
  l.sessions = count_after("sessions");

  std::vector<int> trained;
  {
    auto s = r.next("trained");
    r.keyword(s, "trained");
    std::size_t n = 0;
    if (!(s >> n)) r.fail("malformed trained count");
    trained.resize(n);
    for (int& t : trained)
      if (!(s >> t)) r.fail("malformed trained task id");
  }
  Registry registry(count_after("registry"));
  for (auto& c : registry) {
    auto s = r.next("registry entry");
    int pol = 0;
    if (!(s >> c.task >> pol) || (pol != 0 && pol != 1)) r.fail("malformed registry entry");
    c.polarity = static_cast<Polarity>(pol);
  }

  std::vector<Tensor> weights, biases;
  for (std::size_t k = 0; k < layers; ++k) {
    weights.push_back(r.tensor("W" + std::to_string(k)));
    biases.push_back(r.tensor("b" + std::to_string(k)));
  }
  Tensor theta = r.tensor("theta");
  Tensor head_bias = r.tensor("head_bias");
  double log_scale = 0.0;
  {
    const std::string v = word_after("log_scale");
    if (!detail::parse_number(std::string_view(v), log_scale)) r.fail("malformed log_scale");
  }

  try {
    FeatureExtractor ex(std::move(weights), std::move(biases), bias);
    Rng unused(0);
    ClassifierHead head(variant, ex.feature_width(), unused);
    head.restore(std::move(theta), std::move(head_bias), log_scale, std::move(registry));
    l.model = Model(std::move(ex), std::move(head));
    l.model.set_trained(std::move(trained));
  } catch (const ParseError&) {
    throw;
  } catch (const Error& e) {
    r.fail(e.what());
  }

  auto s = r.next("memory");
  r.keyword(s, "memory");
  std::string first;
  if (!(s >> first)) r.fail("malformed memory line");
  if (first != "none") {
    std::size_t budget = 0, layer = 0, classes = 0;
    std::string kind;
    if (!detail::parse_number(std::string_view(first), budget) || !(s >> kind >> layer >> classes))
      r.fail("malformed memory line");
    try {
      l.memory.emplace(budget, parse_payload_kind(kind), layer);
    } catch (const ConfigError& e) {
      r.fail(e.what());
    }
    for (std::size_t c = 0; c < classes; ++c) {
      auto cs = r.next("class");
      r.keyword(cs, "class");
      std::size_t index = 0, count = 0;
      if (!(cs >> index >> count)) r.fail("malformed class line");
      std::vector<Exemplar> list(count);
      for (auto& e : list) {
        auto es = r.next("exemplar");
        int pol = 0;
        std::size_t width = 0;
        if (!(es >> e.task >> pol >> width) || (pol != 0 && pol != 1)) r.fail("malformed exemplar line");
        e.polarity = static_cast<Polarity>(pol);
        e.class_index = index;
        e.payload = r.values(width);
      }
      l.memory->restore_class(index, std::move(list));
    }
    try {
      l.memory->check_budget();
    } catch (const ProtocolError& e) {
      r.fail(e.what());
    }
  }
  auto end = r.next("end");
  r.keyword(end, "end");
  return l;
}

}  // namespace cdd
