#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "uofs/config.hpp"
#include "uofs/detector.hpp"
#include "uofs/error.hpp"
#include "uofs/training.hpp"

namespace uofs {

// Layout: "UOFSCKPT", u32 version, u64 header length, JSON header, then the
// raw float32 arrays in header order.
inline constexpr char kCheckpointMagic[8] = {'U', 'O', 'F', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline json model_config_json(const ModelConfig& m) {
  const auto& b = m.backbone;
  return {{"channels", b.channels_per_stage},
          {"stride", b.stride},
          {"roi_grid", b.roi_grid},
          {"feat_dim", b.feat_dim},
          {"head_channels", b.head_channels},
          {"head_depth", b.head_depth},
          {"sada", to_string(m.sada)},
          {"reg_mode", to_string(m.reg_mode)},
          {"head_kind", to_string(m.head_kind)},
          {"n_unknown", m.n_unknown},
          {"tau", m.tau},
          {"orientation", to_string(m.orientation)},
          {"obj_squash", to_string(m.obj_squash)},
          {"eps", m.eps},
          {"feat_init_gain", m.feat_init_gain}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig m;
  auto& b = m.backbone;
  j.at("channels").get_to(b.channels_per_stage);
  j.at("stride").get_to(b.stride);
  j.at("roi_grid").get_to(b.roi_grid);
  j.at("feat_dim").get_to(b.feat_dim);
  j.at("head_channels").get_to(b.head_channels);
  j.at("head_depth").get_to(b.head_depth);
  m.sada = parse_sada_mode(j.at("sada").get<std::string>());
  m.reg_mode = detail::parse_enum("reg_mode", j.at("reg_mode").get<std::string>(), detail::kRegModes);
  m.head_kind = parse_head_kind(j.at("head_kind").get<std::string>());
  j.at("n_unknown").get_to(m.n_unknown);
  j.at("tau").get_to(m.tau);
  m.orientation = detail::parse_enum("orientation", j.at("orientation").get<std::string>(), detail::kOrientations);
  m.obj_squash = detail::parse_enum("obj_squash", j.at("obj_squash").get<std::string>(), detail::kSquashes);
  j.at("eps").get_to(m.eps);
  j.at("feat_init_gain").get_to(m.feat_init_gain);
  return m;
}

struct CheckpointMeta {
  std::string fingerprint;
  json extra = json::object();
};

namespace detail {

inline void write_block(std::ofstream& out, const float* p, std::size_t n) {
  out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * sizeof(float)));
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const TrainState<float>& state,
                            const CheckpointMeta& meta) {
  auto& model = const_cast<Detector<float>&>(state.model);
  auto params = model.parameters();
  json tensors = json::array();
  for (const auto& p : params) tensors.push_back({{"name", p.name}, {"shape", p.shape}});
  json moments = json::array();
  for (const auto& [name, v] : state.optimizer.velocity) moments.push_back({{"name", name}, {"size", v.size()}});
  json history = json::array();
  for (const auto& r : state.history) history.push_back({r.step, r.l_bs, r.l_pbbs, r.l_det, r.lr});
  const json header = {{"fingerprint", meta.fingerprint},
                       {"model", model_config_json(model.config)},
                       {"class_ids", model.class_ids},
                       {"pixel_mean", model.pixel_mean},
                       {"pixel_std", model.pixel_std},
                       {"tau", model.head.tau},
                       {"step", state.step},
                       {"momentum", state.optimizer.momentum},
                       {"weight_decay", state.optimizer.weight_decay},
                       {"tensors", tensors},
                       {"moments", moments},
                       {"history", history},
                       {"extra", meta.extra}};
  const std::string text = header.dump();
  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(kCheckpointMagic, 8);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : params) detail::write_block(out, p.value, std::size_t(p.size));
    for (const auto& [name, v] : state.optimizer.velocity) detail::write_block(out, v.data(), std::size_t(v.size()));
    if (!out) throw Error("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
  TrainState<float> state;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw Error(path.string() + " is not a checkpoint");
  if (version != kCheckpointVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const json header = json::parse(text);

  LoadedCheckpoint out;
  out.meta.fingerprint = header.at("fingerprint").get<std::string>();
  out.meta.extra = header.at("extra");
  const ModelConfig mcfg = model_config_from_json(header.at("model"));
  const auto class_ids = header.at("class_ids").get<std::vector<int>>();
  // Build a model of the saved base shape, then grow it to the saved class count.
  auto& model = out.state.model;
  const auto& tensors = header.at("tensors");
  std::vector<Eigen::Index> cls_shape;
  for (const auto& t : tensors)
    if (t.at("name") == "head.W_cls") cls_shape = t.at("shape").get<std::vector<Eigen::Index>>();
  model = Detector<float>(mcfg, class_ids, 0);
  if (!cls_shape.empty() && cls_shape[1] != model.head.W_cls.cols())
    throw Error("checkpoint prototype count does not match its class list");
  model.pixel_mean = header.at("pixel_mean").get<std::array<double, 3>>();
  model.pixel_std = header.at("pixel_std").get<std::array<double, 3>>();
  auto params = model.parameters();
  if (params.size() != tensors.size()) throw Error("checkpoint tensor list does not match the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].at("name") != params[i].name ||
        tensors[i].at("shape").get<std::vector<Eigen::Index>>() != params[i].shape)
      throw Error("checkpoint tensor " + tensors[i].at("name").get<std::string>() + " does not match the model");
    in.read(reinterpret_cast<char*>(params[i].value), static_cast<std::streamsize>(params[i].size * sizeof(float)));
  }
  for (const auto& m : header.at("moments")) {
    Vec<float> v(m.at("size").get<Eigen::Index>());
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    out.state.optimizer.velocity[m.at("name").get<std::string>()] = std::move(v);
  }
  if (!in) throw Error("checkpoint " + path.string() + " is truncated");
  out.state.optimizer.momentum = header.at("momentum").get<double>();
  out.state.optimizer.weight_decay = header.at("weight_decay").get<double>();
  out.state.step = header.at("step").get<int>();
  for (const auto& r : header.at("history"))
    out.state.history.push_back({r[0].get<int>(), r[1].get<double>(), r[2].get<double>(), r[3].get<double>(),
                                 r[4].get<double>()});
  model.zero_grad();
  return out;
}

}  // namespace uofs
