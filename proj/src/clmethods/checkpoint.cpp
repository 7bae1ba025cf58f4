#include <cstring>
#include <fstream>

#include "lingo/clmethods.hpp"

namespace lingo::clmethods {

namespace {

constexpr char kMagic[8] = {'L', 'G', 'C', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(std::ostream& os) : os_(os) {}

  template <typename T>
  void pod(const T& v) {
    os_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void u64(std::uint64_t v) { pod(v); }
  void str(const std::string& s) {
    u64(s.size());
    os_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void doubles(const std::vector<double>& v) {
    u64(v.size());
    os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  void tensor(const Tensor2D& t) {
    u64(t.rows());
    u64(t.cols());
    doubles(t.data());
  }
  void encoder(const EncoderModel& m) {
    u64(m.layers.size());
    for (const auto& l : m.layers) {
      u64(static_cast<std::uint64_t>(l.activation));
      tensor(l.weight);
      doubles(l.bias);
    }
  }
  void example(const LabeledExample& ex) {
    pod<std::int64_t>(ex.class_id);
    pod<std::int64_t>(ex.domain_id);
    str(ex.class_name);
    doubles(ex.features);
  }

 private:
  std::ostream& os_;
};

class Reader {
 public:
  explicit Reader(std::istream& is) : is_(is) {}

  template <typename T>
  T pod() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is_) throw IoError("truncated checkpoint");
    return v;
  }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  std::uint64_t count() {
    const auto n = u64();
    if (n > (1ULL << 32)) throw IoError("corrupt checkpoint length");
    return n;
  }
  std::string str() {
    std::string s(count(), '\0');
    is_.read(s.data(), static_cast<std::streamsize>(s.size()));
    if (!is_) throw IoError("truncated checkpoint");
    return s;
  }
  std::vector<double> doubles() {
    std::vector<double> v(count());
    is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is_) throw IoError("truncated checkpoint");
    return v;
  }
  Tensor2D tensor() {
    const auto r = count();
    const auto c = count();
    return Tensor2D(r, c, doubles());
  }
  EncoderModel encoder() {
    EncoderModel m;
    const auto n = count();
    for (std::uint64_t i = 0; i < n; ++i) {
      numcore::Layer l;
      l.activation = static_cast<numcore::Activation>(u64());
      l.weight = tensor();
      l.bias = doubles();
      m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
  }
  LabeledExample example() {
    LabeledExample ex;
    ex.class_id = static_cast<int>(pod<std::int64_t>());
    ex.domain_id = static_cast<int>(pod<std::int64_t>());
    ex.class_name = str();
    ex.features = doubles();
    return ex;
  }

 private:
  std::istream& is_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const LearnerState& state) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write checkpoint " + tmp);
    Writer w(os);
    os.write(kMagic, sizeof(kMagic));
    w.pod(kVersion);

    w.encoder(state.encoder);

    w.str(supervision::to_string(state.head.regime()));
    w.u64(state.head.dim());
    w.u64(state.head.num_blocks());
    for (const auto& b : state.head.blocks()) {
      w.tensor(b.weights);
      w.u64(b.class_ids.size());
      for (std::size_t i = 0; i < b.class_ids.size(); ++i) {
        w.pod<std::int64_t>(b.class_ids[i]);
        w.str(b.class_names[i]);
      }
    }

    w.u64(state.buffer.capacity_per_class);
    w.u64(state.buffer.exemplars.size());
    for (const auto& [key, list] : state.buffer.exemplars) {
      w.pod<std::int64_t>(key);
      w.u64(list.size());
      for (const auto& ex : list) w.example(ex);
    }

    w.u64(state.ewc ? 1 : 0);
    if (state.ewc) {
      w.pod(state.ewc->lambda);
      w.doubles(state.ewc->anchor);
      w.doubles(state.ewc->fisher);
    }
    w.u64(state.distill ? 1 : 0);
    if (state.distill) {
      w.pod(state.distill->weight);
      w.encoder(state.distill->snapshot);
    }
    w.str(state.rng.state());
    w.u64(state.tasks_seen);
    if (!os) throw IoError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

LearnerState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw IoError("not a checkpoint file");
  Reader r(is);
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));

  LearnerState state;
  state.encoder = r.encoder();

  const auto regime = supervision::regime_from_string(r.str());
  const auto dim = r.count();
  state.head = supervision::ClassifierHead(regime, dim);
  const auto blocks = r.count();
  for (std::uint64_t b = 0; b < blocks; ++b) {
    supervision::HeadBlock block;
    block.weights = r.tensor();
    const auto rows = r.count();
    for (std::uint64_t i = 0; i < rows; ++i) {
      block.class_ids.push_back(static_cast<int>(r.pod<std::int64_t>()));
      block.class_names.push_back(r.str());
    }
    state.head.append(std::move(block));
  }

  state.buffer.capacity_per_class = r.count();
  const auto keys = r.count();
  for (std::uint64_t k = 0; k < keys; ++k) {
    const int key = static_cast<int>(r.pod<std::int64_t>());
    auto& list = state.buffer.exemplars[key];
    const auto n = r.count();
    for (std::uint64_t i = 0; i < n; ++i) list.push_back(r.example());
  }

  if (r.u64() != 0) {
    EwcState ewc;
    ewc.lambda = r.pod<double>();
    ewc.anchor = r.doubles();
    ewc.fisher = r.doubles();
    state.ewc = std::move(ewc);
  }
  if (r.u64() != 0) {
    DistillState d;
    d.weight = r.pod<double>();
    d.snapshot = r.encoder();
    state.distill = std::move(d);
  }
  state.rng.set_state(r.str());
  state.tasks_seen = r.count();
  return state;
}

}  // namespace lingo::clmethods
