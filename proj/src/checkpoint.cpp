#include "toist/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "toist/binary_io.hpp"

namespace toist::ckpt {

namespace {

constexpr char kMagic[8] = {'T', 'O', 'I', 'S', 'T', 'C', 'K', '\0'};
constexpr std::uint8_t kFloat32 = 0;

using Reader = io::Reader<FormatError>;

void put_matrix(io::Writer& w, const ad::Mat<float>& m) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.put<float>(m.data()[i]);
}

ad::Mat<float> get_matrix(Reader& r, const char* what) {
  const std::uint32_t rows = r.count(what, 1u << 24), cols = r.count(what, 1u << 24);
  r.need(static_cast<std::size_t>(rows) * cols * sizeof(float), what);
  ad::Mat<float> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = r.get<float>(what);
  return m;
}

void put_state(io::Writer& w, const ModelState& s) {
  w.str(s.role);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(s.form));
  w.put<std::int32_t>(s.epoch);
  w.str(s.rng_state);
  const auto& ps = s.params.all();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(ps.size()));
  for (const auto& p : ps) {
    w.str(p.name);
    w.put<std::uint8_t>(kFloat32);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.shape.size()));
    for (ad::Index d : p.value.shape) w.put<std::int64_t>(d);
    for (Eigen::Index i = 0; i < p.value.data.size(); ++i) w.put<float>(p.value.data.data()[i]);
  }
  w.put<std::uint64_t>(s.optimizer_steps);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(s.first_moments.size()));
  for (std::size_t i = 0; i < s.first_moments.size(); ++i) {
    put_matrix(w, s.first_moments[i]);
    put_matrix(w, s.second_moments[i]);
  }
}

ModelState get_state(Reader& r) {
  ModelState s;
  s.role = r.str("role");
  const std::size_t at = r.pos();
  const auto form = r.get<std::uint8_t>("description form");
  if (form > 1) r.fail(at, "bad description form " + std::to_string(form));
  s.form = static_cast<train::TextForm>(form);
  s.epoch = r.get<std::int32_t>("epoch");
  s.rng_state = r.str("rng state");
  const std::uint32_t n = r.count("parameter count", 1u << 16);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str("parameter name");
    const std::size_t dt = r.pos();
    if (r.get<std::uint8_t>("dtype") != kFloat32) r.fail(dt, "unsupported dtype for " + name);
    const std::uint32_t ndim = r.count("rank", 8);
    ad::Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::size_t da = r.pos();
      const auto v = r.get<std::int64_t>("dimension");
      if (v < 0 || v > (1 << 24)) r.fail(da, "bad dimension for " + name);
      shape.push_back(v);
    }
    ad::Tensor<float> t(shape);
    r.need(static_cast<std::size_t>(t.data.size()) * sizeof(float), "parameter payload");
    for (Eigen::Index k = 0; k < t.data.size(); ++k) t.data.data()[k] = r.get<float>("parameter payload");
    s.params.add(std::move(name), std::move(t));
  }
  s.optimizer_steps = r.get<std::uint64_t>("optimizer steps");
  const std::uint32_t nm = r.count("moment count", 1u << 16);
  for (std::uint32_t i = 0; i < nm; ++i) {
    s.first_moments.push_back(get_matrix(r, "first moment"));
    s.second_moments.push_back(get_matrix(r, "second moment"));
  }
  return s;
}

}  // namespace

const ModelState& Checkpoint::model(const std::string& role) const {
  for (const ModelState& m : models)
    if (m.role == role) return m;
  throw FormatError("checkpoint has no '" + role + "' model");
}

bool Checkpoint::has(const std::string& role) const {
  for (const ModelState& m : models)
    if (m.role == role) return true;
  return false;
}

ModelState capture(const std::string& role, const train::ModelTrainer& t) {
  ModelState s;
  s.role = role;
  s.form = t.form;
  s.epoch = t.epoch;
  std::ostringstream os;
  os << t.shuffle_rng;
  s.rng_state = os.str();
  s.params = t.params.cast<float>();
  s.optimizer_steps = t.optimizer.steps();
  s.first_moments = t.optimizer.first_moments();
  s.second_moments = t.optimizer.second_moments();
  return s;
}

void restore(const ModelState& s, train::ModelTrainer& t) {
  auto& dst = t.params.all();
  const auto& src = s.params.all();
  if (dst.size() != src.size())
    throw FormatError("checkpoint '" + s.role + "' has " + std::to_string(src.size()) +
                      " parameters, the configured model has " + std::to_string(dst.size()));
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i].name != src[i].name || dst[i].value.shape != src[i].value.shape)
      throw FormatError("checkpoint parameter '" + src[i].name + "' does not match model parameter '" + dst[i].name +
                        "' (" + ad::to_string(src[i].value.shape) + " vs " + ad::to_string(dst[i].value.shape) + ")");
    dst[i].value.data = src[i].value.data;
    dst[i].zero_grad();
  }
  if (!s.first_moments.empty() && s.first_moments.size() != dst.size())
    throw FormatError("checkpoint optimizer state does not match the parameter list");
  t.form = s.form;
  t.epoch = s.epoch;
  std::istringstream is(s.rng_state);
  is >> t.shuffle_rng;
  if (!is) throw FormatError("checkpoint RNG state is unreadable");
  t.optimizer.set_steps(s.optimizer_steps);
  t.optimizer.first_moments() = s.first_moments;
  t.optimizer.second_moments() = s.second_moments;
}

std::vector<std::uint8_t> serialize(const Checkpoint& c) {
  io::Writer w;
  w.raw(kMagic, 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.str(c.config_text);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.models.size()));
  for (const ModelState& m : c.models) put_state(w, m);
  w.put<std::uint8_t>(c.bank ? 1 : 0);
  if (c.bank) {
    const distill::MemoryBank& b = *c.bank;
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.n_task()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.capacity()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.dim()));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(b.k()));
    w.put<std::uint8_t>(static_cast<std::uint8_t>(b.policy()));
    w.put<std::uint64_t>(b.seed());
    w.put<std::uint8_t>(b.frozen() ? 1 : 0);
    for (int t = 0; t < b.n_task(); ++t) {
      w.put<std::uint64_t>(b.updates(t));
      const Eigen::MatrixXd e = b.entries(t);
      w.put<std::uint32_t>(static_cast<std::uint32_t>(e.rows()));
      for (Eigen::Index i = 0; i < e.rows(); ++i)
        for (Eigen::Index j = 0; j < e.cols(); ++j) w.put<double>(e(i, j));
    }
  }
  return std::move(w.bytes);
}

Checkpoint deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "checkpoint");
  r.need(8, "magic");
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) r.fail(0, "bad magic, not a checkpoint file");
  r.seek(8);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (this build reads version " +
                      std::to_string(kCheckpointVersion) + ")");
  Checkpoint c;
  c.config_text = r.str("config");
  const std::uint32_t n = r.count("model count", 16);
  for (std::uint32_t i = 0; i < n; ++i) c.models.push_back(get_state(r));
  if (r.get<std::uint8_t>("bank flag")) {
    const int n_task = static_cast<int>(r.count("bank tasks", 1024));
    const int capacity = static_cast<int>(r.count("bank capacity", 1u << 20));
    const int dim = static_cast<int>(r.count("bank dim", 1u << 16));
    const int k = static_cast<int>(r.count("bank k", 1u << 16));
    const std::size_t at = r.pos();
    const auto policy = r.get<std::uint8_t>("bank policy");
    if (policy > 1) r.fail(at, "bad memory policy tag");
    const auto seed = r.get<std::uint64_t>("bank seed");
    const bool frozen = r.get<std::uint8_t>("bank frozen") != 0;
    try {
      c.bank.emplace(n_task, capacity, dim, k, static_cast<distill::UpdatePolicy>(policy), seed);
    } catch (const std::invalid_argument& e) {
      r.fail(at, e.what());
    }
    for (int t = 0; t < n_task; ++t) {
      const auto updates = r.get<std::uint64_t>("bank updates");
      const std::uint32_t rows = r.count("bank queue length", static_cast<std::uint32_t>(capacity));
      r.need(static_cast<std::size_t>(rows) * static_cast<std::size_t>(dim) * sizeof(double), "bank queue");
      Eigen::MatrixXd e(rows, dim);
      for (Eigen::Index i = 0; i < e.rows(); ++i)
        for (Eigen::Index j = 0; j < e.cols(); ++j) e(i, j) = r.get<double>("bank entry");
      c.bank->restore(t, e, updates);
    }
    if (frozen) c.bank->freeze();
  }
  if (!r.done()) r.fail(r.pos(), "trailing bytes after the checkpoint end");
  return c;
}

void save(const Checkpoint& c, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize(c);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace toist::ckpt
