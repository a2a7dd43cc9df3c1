#include "ltds/checkpoint.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ltds/error.hpp"

namespace ltds {

using nlohmann::json;

namespace {

json matrix_json(const Matrix& m) { return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.values()}}; }

Matrix matrix_from(const json& j) {
  const auto r = j.at("rows").get<std::size_t>();
  const auto c = j.at("cols").get<std::size_t>();
  auto v = j.at("data").get<std::vector<double>>();
  if (v.size() != r * c) throw InputError("checkpoint: matrix size mismatch");
  return Matrix(r, c, std::move(v));
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, std::uint64_t dataset_fingerprint,
                     const meta::TrainState& s) {
  json j;
  j["format"] = "ltds-checkpoint";
  j["version"] = kCheckpointVersion;
  j["step"] = s.step;
  j["config_hash"] = hex64(config_hash(cfg));
  j["dataset_fingerprint"] = hex64(dataset_fingerprint);
  j["config"] = json::parse(dump_config(cfg));
  j["rng"] = {{"key", s.rng.key()}, {"counter", s.rng.counter()}};

  json blocks = json::array();
  const auto names = s.params.block_names();
  const auto values = s.params.blocks();
  for (std::size_t i = 0; i < values.size(); ++i) blocks.push_back({{"name", names[i]}, {"value", matrix_json(values[i])}});
  j["params"] = blocks;
  json running = json::object();
  if (s.params.encoder_norm)
    running["encoder"] = {{"mean", matrix_json(s.params.encoder_norm->running_mean)},
                          {"var", matrix_json(s.params.encoder_norm->running_var)}};
  if (s.params.decoder_norm)
    running["decoder"] = {{"mean", matrix_json(s.params.decoder_norm->running_mean)},
                          {"var", matrix_json(s.params.decoder_norm->running_var)}};
  j["running_stats"] = running;

  const auto& pb = s.prototypes;
  json protos = json::array();
  for (std::size_t d = 0; d < pb.num_domains(); ++d) {
    std::vector<int> mask;
    for (std::size_t c = 0; c < pb.num_classes(); ++c) mask.push_back(pb.mask(d, c) ? 1 : 0);
    protos.push_back({{"mask", mask}, {"v", matrix_json(pb.prototypes(d))}});
  }
  j["prototypes"] = {{"ema", pb.ema()}, {"classes", pb.num_classes()}, {"dim", pb.dim()}, {"domains", protos}};

  const auto& cb = s.covariance;
  json cov = json::array();
  for (std::size_t c = 0; c < cb.num_classes(); ++c)
    cov.push_back({{"n", cb.count(c)},
                   {"mu", std::vector<double>(cb.mean(c).begin(), cb.mean(c).end())},
                   {"sigma", matrix_json(cb.covariance(c))}});
  j["covariance"] = {{"dim", cb.dim()}, {"classes", cov}};

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << j.dump() << '\n';
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  json j;
  try {
    j = json::parse(os.str());
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  try {
    if (j.value("format", "") != "ltds-checkpoint") throw InputError("not a checkpoint file");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw InputError("unsupported checkpoint version " + std::to_string(j.at("version").get<int>()));
    Checkpoint ck;
    ck.config = parse_config(j.at("config").dump());
    ck.config_hash = std::stoull(j.at("config_hash").get<std::string>(), nullptr, 16);
    ck.dataset_fingerprint = std::stoull(j.at("dataset_fingerprint").get<std::string>(), nullptr, 16);
    if (ck.config_hash != config_hash(ck.config)) throw InputError("config hash does not match the stored config");

    meta::TrainState& s = ck.state;
    s.step = j.at("step").get<std::size_t>();
    s.rng = Rng(j.at("rng").at("key").get<std::uint64_t>(), j.at("rng").at("counter").get<std::uint64_t>());
    Rng scratch(0);
    s.params = model::init_params(ck.config.model, scratch);
    std::vector<Matrix> blocks;
    for (const json& b : j.at("params")) blocks.push_back(matrix_from(b.at("value")));
    s.params.assign(blocks);
    const json& running = j.at("running_stats");
    if (s.params.encoder_norm) {
      s.params.encoder_norm->running_mean = matrix_from(running.at("encoder").at("mean"));
      s.params.encoder_norm->running_var = matrix_from(running.at("encoder").at("var"));
    }
    if (s.params.decoder_norm) {
      s.params.decoder_norm->running_mean = matrix_from(running.at("decoder").at("mean"));
      s.params.decoder_norm->running_var = matrix_from(running.at("decoder").at("var"));
    }

    const json& pj = j.at("prototypes");
    const json& doms = pj.at("domains");
    s.prototypes = banks::PrototypeBank(doms.size(), pj.at("classes").get<std::size_t>(),
                                        pj.at("dim").get<std::size_t>(), pj.at("ema").get<double>());
    for (std::size_t d = 0; d < doms.size(); ++d) {
      const auto mask = doms[d].at("mask").get<std::vector<int>>();
      for (std::size_t c = 0; c < mask.size(); ++c) s.prototypes.set_mask(d, c, mask[c] != 0);
      Matrix v = matrix_from(doms[d].at("v"));
      if (!v.same_shape(s.prototypes.prototypes(d))) throw InputError("prototype table shape mismatch");
      s.prototypes.prototypes(d) = std::move(v);
    }

    const json& cj = j.at("covariance");
    const json& classes = cj.at("classes");
    s.covariance = banks::CovarianceBank(classes.size(), cj.at("dim").get<std::size_t>());
    for (std::size_t c = 0; c < classes.size(); ++c) {
      const auto mu = classes[c].at("mu").get<std::vector<double>>();
      s.covariance.set(c, mu, matrix_from(classes[c].at("sigma")), classes[c].at("n").get<long>());
    }
    return ck;
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 1, e.what());
  } catch (const InputError& e) {
    throw ParseError(path.string(), 1, e.what());
  }
}

}  // namespace ltds
