#ifndef FUSIONDET_CHECKPOINT_HPP
#define FUSIONDET_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "fusiondet/anchor.hpp"
#include "fusiondet/common.hpp"
#include "fusiondet/model.hpp"
#include "fusiondet/runconfig.hpp"
#include "fusiondet/trainer.hpp"

namespace fusiondet {

/// Single-file checkpoint container, version 1.
///
/// Layout (little-endian):
///   "FDCP" magic, u32 version,
///   u64 config length + canonical config JSON,
///   u32 anchor count, f64 stride, (f32 w, f32 h) per shape,
///   u64 iteration,
///   u32 parameter record count, then per record:
///     u32 name length, name bytes, 4x u32 dims, u64 value count, f32 values
///   u32 velocity record count, same record encoding.
/// Records are written in the model's fixed parameter order, so
/// save(load(file)) reproduces the file byte for byte.
inline constexpr char kCheckpointMagic[4] = {'F', 'D', 'C', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace ckpt_detail {

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw ValidationError(std::string("checkpoint: truncated while reading ") + what);
  return value;
}

inline void write_string(std::ostream& out, const std::string& s) {
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& in, const char* what) {
  const auto n = read_pod<std::uint32_t>(in, what);
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) throw ValidationError(std::string("checkpoint: truncated while reading ") + what);
  return s;
}

struct TensorRecord {
  std::array<Index, 4> dims{1, 1, 1, 1};
  std::vector<float> values;
};

template <typename Scalar>
void write_record(std::ostream& out, const std::string& name, const Scalar* data, Index size,
                  const std::array<Index, 4>& dims) {
  write_string(out, name);
  for (Index d : dims) write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(size));
  for (Index i = 0; i < size; ++i) write_pod<float>(out, static_cast<float>(data[i]));
}

inline std::pair<std::string, TensorRecord> read_record(std::istream& in) {
  std::string name = read_string(in, "tensor name");
  TensorRecord rec;
  for (auto& d : rec.dims) d = static_cast<Index>(read_pod<std::uint32_t>(in, "tensor dims"));
  const auto count = read_pod<std::uint64_t>(in, "tensor size");
  rec.values.resize(count);
  in.read(reinterpret_cast<char*>(rec.values.data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw ValidationError("checkpoint: truncated tensor data for " + name);
  return {std::move(name), std::move(rec)};
}

}  // namespace ckpt_detail

template <typename Scalar>
void save_checkpoint(const std::string& path, DetectorModel<Scalar>& model,
                     const SgdmState<Scalar>& state, std::uint64_t iteration,
                     const RunConfig& config) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_checkpoint: cannot open " + path + " for writing");
  out.write(kCheckpointMagic, 4);
  ckpt_detail::write_pod<std::uint32_t>(out, kCheckpointVersion);

  const std::string config_json = run_config_to_json(config);
  ckpt_detail::write_pod<std::uint64_t>(out, config_json.size());
  out.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));

  ckpt_detail::write_pod<std::uint32_t>(out,
                                        static_cast<std::uint32_t>(model.anchors.shapes.size()));
  ckpt_detail::write_pod<double>(out, model.anchors.stride);
  for (const auto& s : model.anchors.shapes) {
    ckpt_detail::write_pod<float>(out, static_cast<float>(s.first));
    ckpt_detail::write_pod<float>(out, static_cast<float>(s.second));
  }
  ckpt_detail::write_pod<std::uint64_t>(out, iteration);

  auto params = collect_parameters(model);
  ckpt_detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    ckpt_detail::write_record(out, p.name, p.data, p.size, p.dims);
  }
  if (!state.velocity.empty() && state.velocity.size() != params.size()) {
    throw DimensionError("save_checkpoint: velocity buffers misaligned with parameters");
  }
  ckpt_detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(state.velocity.size()));
  for (size_t i = 0; i < state.velocity.size(); ++i) {
    ckpt_detail::write_record(out, params[i].name, state.velocity[i].data(),
                              state.velocity[i].size(), params[i].dims);
  }
  if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

template <typename Scalar>
struct LoadedCheckpoint {
  RunConfig config;
  DetectorModel<Scalar> model;
  SgdmState<Scalar> state;
  std::uint64_t iteration = 0;
};

/// Rebuilds the model described by the checkpoint's config snapshot and
/// fills every parameter (and velocity buffer) by name. A parameter missing
/// from the file, present twice, or with unexpected dims is an error.
template <typename Scalar>
LoadedCheckpoint<Scalar> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_checkpoint: cannot open " + path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ValidationError("load_checkpoint: " + path +
                          " is not a checkpoint (bad magic; format version check failed)");
  }
  const auto version = ckpt_detail::read_pod<std::uint32_t>(in, "format version");
  if (version != kCheckpointVersion) {
    throw ValidationError("load_checkpoint: unsupported format version " +
                          std::to_string(version) + " in " + path);
  }

  const auto config_len = ckpt_detail::read_pod<std::uint64_t>(in, "config length");
  std::string config_json(config_len, '\0');
  in.read(config_json.data(), static_cast<std::streamsize>(config_len));
  if (!in) throw ValidationError("load_checkpoint: truncated config block");

  LoadedCheckpoint<Scalar> loaded;
  loaded.config = run_config_from_json(config_json);

  AnchorSet anchors;
  const auto k = ckpt_detail::read_pod<std::uint32_t>(in, "anchor count");
  anchors.stride = ckpt_detail::read_pod<double>(in, "anchor stride");
  for (std::uint32_t i = 0; i < k; ++i) {
    const float w = ckpt_detail::read_pod<float>(in, "anchor shape");
    const float h = ckpt_detail::read_pod<float>(in, "anchor shape");
    anchors.shapes.push_back({w, h});
  }
  loaded.iteration = ckpt_detail::read_pod<std::uint64_t>(in, "iteration");

  std::map<std::string, ckpt_detail::TensorRecord> params;
  const auto n_params = ckpt_detail::read_pod<std::uint32_t>(in, "parameter count");
  for (std::uint32_t i = 0; i < n_params; ++i) {
    auto [name, rec] = ckpt_detail::read_record(in);
    if (!params.emplace(std::move(name), std::move(rec)).second) {
      throw ValidationError("load_checkpoint: duplicate parameter record");
    }
  }
  std::map<std::string, ckpt_detail::TensorRecord> velocity;
  const auto n_vel = ckpt_detail::read_pod<std::uint32_t>(in, "velocity count");
  for (std::uint32_t i = 0; i < n_vel; ++i) {
    auto [name, rec] = ckpt_detail::read_record(in);
    velocity.emplace(std::move(name), std::move(rec));
  }

  loaded.model = make_detector_model<Scalar>(loaded.config.backbone_config(),
                                             loaded.config.num_classes, loaded.config.fc_hidden,
                                             anchors, loaded.config.seed);
  loaded.state = make_sgdm_state(loaded.model, static_cast<Scalar>(loaded.config.learning_rate),
                                 static_cast<Scalar>(loaded.config.momentum));
  size_t index = 0;
  for_each_parameter(loaded.model, [&](const NamedParam<Scalar>& p) {
    const auto it = params.find(p.name);
    if (it == params.end()) {
      throw ValidationError("load_checkpoint: missing parameter " + p.name);
    }
    if (static_cast<Index>(it->second.values.size()) != p.size) {
      throw ValidationError("load_checkpoint: size mismatch for " + p.name);
    }
    for (Index i = 0; i < p.size; ++i) {
      p.data[i] = static_cast<Scalar>(it->second.values[static_cast<size_t>(i)]);
    }
    const auto vit = velocity.find(p.name);
    if (vit != velocity.end()) {
      if (static_cast<Index>(vit->second.values.size()) != p.size) {
        throw ValidationError("load_checkpoint: velocity size mismatch for " + p.name);
      }
      for (Index i = 0; i < p.size; ++i) {
        loaded.state.velocity[index][i] =
            static_cast<Scalar>(vit->second.values[static_cast<size_t>(i)]);
      }
    }
    ++index;
  });
  return loaded;
}

}  // namespace fusiondet

#endif  // FUSIONDET_CHECKPOINT_HPP
