#include "rawgat/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace rawgat {

namespace {

constexpr char kMagic[8] = {'R', 'A', 'W', 'G', 'A', 'T', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

std::int64_t pool_keep(double ratio, std::int64_t n) {
  return std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::floor(ratio * static_cast<double>(n))));
}

template <class S>
Shape strip_batch(const TensorT<S>& t) {
  Shape s = t.shape();
  s.erase(s.begin());
  return s;
}

template <class S>
Shape graph_display(const GraphT<S>& g) {
  return {g.feature_dim(), g.num_nodes()};
}

}  // namespace

void ModelConfig::validate() const {
  auto bad = [](const std::string& field, const std::string& why) {
    throw Error(ErrorKind::config, concat_msg("config: ", field, " ", why));
  };
  if (num_filters < 3) bad("num_filters", "must be at least 3");
  if (kernel_length < 3 || kernel_length % 2 == 0)
    bad("kernel_length", "must be odd and at least 3");
  if (sample_rate <= 0) bad("sample_rate", "must be positive");
  if (input_length <= kernel_length)
    bad("input_length", "must exceed the kernel length");
  std::int64_t t = (input_length - kernel_length + 1) / 3;
  for (int i = 0; i < 6; ++i) t /= 3;
  if (t < 1)
    bad("input_length",
        concat_msg("too short: no temporal frame survives the encoder "
                   "(minimum is ",
                   kernel_length + 3 * 729 - 1, " samples)"));
  for (auto [name, k] : {std::pair<const char*, double>{"k_spec", k_spec},
                         {"k_temp", k_temp},
                         {"k_st", k_st}})
    if (!(k > 0.0 && k <= 1.0)) bad(name, "must lie in (0, 1]");
  if (!use_spectral && !use_temporal)
    bad("use_spectral/use_temporal", "at least one branch must stay enabled");
  if (f_mask < 0 || f_mask > num_filters / 3)
    bad("f_mask", concat_msg("must lie in [0, ", num_filters / 3, "]"));
}

ModelDims derive_dims(const ModelConfig& config) {
  config.validate();
  ModelDims d;
  d.conv_width = config.input_length - config.kernel_length + 1;
  d.freq_bins = config.num_filters / 3;
  d.frontend_width = d.conv_width / 3;
  d.enc_time = d.frontend_width;
  for (int i = 0; i < 6; ++i) d.enc_time /= 3;
  d.spec_nodes = d.freq_bins;
  d.temp_nodes = d.enc_time;
  d.spec_kept =
      config.use_pooling ? pool_keep(config.k_spec, d.spec_nodes) : d.spec_nodes;
  d.temp_kept =
      config.use_pooling ? pool_keep(config.k_temp, d.temp_nodes) : d.temp_nodes;
  const bool both = config.use_spectral && config.use_temporal;
  d.st_in_dim = (both && config.fusion == FusionMode::concat)
                    ? 2 * d.branch_dim
                    : d.branch_dim;
  d.st_kept =
      config.use_pooling ? pool_keep(config.k_st, d.fused_nodes) : d.fused_nodes;
  return d;
}

std::vector<TraceRow> expected_trace(const ModelConfig& config) {
  const ModelDims d = derive_dims(config);
  std::vector<TraceRow> rows;
  rows.push_back({"sinc", {config.num_filters, d.conv_width}});
  rows.push_back({"add-channel", {1, config.num_filters, d.conv_width}});
  rows.push_back({"maxpool", {1, d.freq_bins, d.frontend_width}});
  std::int64_t t = d.frontend_width / 3;
  t /= 3;
  rows.push_back({"res-stack-1", {32, d.freq_bins, t}});
  rows.push_back({"res-stack-2", {64, d.freq_bins, d.enc_time}});
  auto branch = [&](const std::string& prefix, std::int64_t nodes,
                    std::int64_t kept) {
    rows.push_back({prefix + "-readout", {64, nodes}});
    rows.push_back({prefix + "-gat", {d.branch_dim, nodes}});
    if (config.use_pooling)
      rows.push_back({prefix + "-pool", {d.branch_dim, kept}});
    rows.push_back({prefix + "-projection", {d.branch_dim, d.fused_nodes}});
  };
  if (config.use_spectral) branch("spectral", d.spec_nodes, d.spec_kept);
  if (config.use_temporal) branch("temporal", d.temp_nodes, d.temp_kept);
  if (config.use_spectral && config.use_temporal)
    rows.push_back({"fusion", {d.st_in_dim, d.fused_nodes}});
  rows.push_back({"st-gat", {d.st_dim, d.fused_nodes}});
  if (config.use_pooling) rows.push_back({"st-pool", {d.st_dim, d.st_kept}});
  rows.push_back({"st-projection", {1, d.st_kept}});
  rows.push_back({"output", {2}});
  return rows;
}

template <class S>
RawGatModelT<S>::RawGatModelT(const ModelConfig& cfg) : config(cfg) {
  const ModelDims d = derive_dims(config);
  frontend = SincFrontendT<S>(config.num_filters, config.kernel_length,
                              config.sample_rate, config.input_length);
  Rng root(config.seed);
  // Every module draws from its own named stream, so toggling one ablation
  // flag cannot shift another module's initialization.
  {
    Rng r = root.fork("encoder");
    encoder = EncoderT<S>(r);
  }
  if (config.use_spectral) {
    Rng r1 = root.fork("spectral-gat");
    spec_gat = GatLayerT<S>(64, d.branch_dim, r1);
    if (config.use_pooling) {
      Rng r2 = root.fork("spectral-pool");
      spec_pool = GraphPoolT<S>(d.branch_dim, config.k_spec, r2);
    }
    Rng r3 = root.fork("spectral-proj");
    spec_proj = NodeProjectionT<S>(d.spec_kept, d.fused_nodes, r3);
  }
  if (config.use_temporal) {
    Rng r1 = root.fork("temporal-gat");
    temp_gat = GatLayerT<S>(64, d.branch_dim, r1);
    if (config.use_pooling) {
      Rng r2 = root.fork("temporal-pool");
      temp_pool = GraphPoolT<S>(d.branch_dim, config.k_temp, r2);
    }
    Rng r3 = root.fork("temporal-proj");
    temp_proj = NodeProjectionT<S>(d.temp_kept, d.fused_nodes, r3);
  }
  {
    Rng r = root.fork("st-gat");
    st_gat = GatLayerT<S>(d.st_in_dim, d.st_dim, r);
  }
  if (config.use_pooling) {
    Rng r = root.fork("st-pool");
    st_pool = GraphPoolT<S>(d.st_dim, config.k_st, r);
  }
  {
    Rng r = root.fork("st-proj");
    st_proj = DenseT<S>(d.st_dim, 1, r);
  }
  {
    Rng r = root.fork("fc");
    fc_out = DenseT<S>(d.st_kept, 2, r);
  }
}

template <class S>
TensorT<S> RawGatModelT<S>::forward(const TensorT<S>& wave, bool training,
                                    const std::vector<S>* channel_mask,
                                    std::vector<TraceRow>* trace) {
  require(wave.defined() && (wave.rank() == 1 || wave.rank() == 2),
          ErrorKind::dimension, "model: wave must be (L) or (B, L)");
  const bool batched = wave.rank() == 2;
  const std::int64_t batch = batched ? wave.dim(0) : 1;
  auto w = batched ? wave : reshape(wave, {1, wave.dim(0)});

  std::vector<TensorT<S>> fe_stages;
  auto fe = frontend.forward(w, training, trace ? &fe_stages : nullptr);
  if (trace) {
    trace->push_back({"sinc", strip_batch(fe_stages[0])});
    trace->push_back({"add-channel", strip_batch(fe_stages[1])});
    trace->push_back({"maxpool", strip_batch(fe_stages[2])});
  }
  if (training && channel_mask) {
    require(static_cast<std::int64_t>(channel_mask->size()) == fe.dim(-2),
            ErrorKind::contract,
            concat_msg("model: channel mask must cover ", fe.dim(-2),
                       " channels"));
    auto m = TensorT<S>::from_data({fe.dim(-2)}, *channel_mask);
    fe = scale_axis(fe, -2, m);
  }

  std::vector<TensorT<S>> per_block;
  auto enc = encoder.forward(fe, training, trace ? &per_block : nullptr);
  if (trace) {
    trace->push_back(
        {"res-stack-1",
         strip_batch(per_block[EncoderT<S>::kFirstStackBlocks - 1])});
    trace->push_back({"res-stack-2", strip_batch(enc)});
  }

  auto run_branch = [&](GraphT<S> g, GatLayerT<S>& gat, GraphPoolT<S>& pool,
                        NodeProjectionT<S>& proj, const std::string& prefix) {
    if (trace) trace->push_back({prefix + "-readout", graph_display(g)});
    g = gat.forward(g, training);
    if (trace) trace->push_back({prefix + "-gat", graph_display(g)});
    if (config.use_pooling) {
      g = pool.forward(g).graph;
      if (trace) trace->push_back({prefix + "-pool", graph_display(g)});
    }
    g = proj.forward(g);
    if (trace) trace->push_back({prefix + "-projection", graph_display(g)});
    return g;
  };

  GraphT<S> fused;
  if (config.use_spectral && config.use_temporal) {
    auto gs = run_branch(spectral_readout(enc), spec_gat, spec_pool, spec_proj,
                         "spectral");
    auto gt = run_branch(temporal_readout(enc), temp_gat, temp_pool, temp_proj,
                         "temporal");
    fused = fuse(gs, gt, config.fusion);
    if (trace) trace->push_back({"fusion", graph_display(fused)});
  } else if (config.use_spectral) {
    fused = run_branch(spectral_readout(enc), spec_gat, spec_pool, spec_proj,
                       "spectral");
  } else {
    fused = run_branch(temporal_readout(enc), temp_gat, temp_pool, temp_proj,
                       "temporal");
  }

  auto st = st_gat.forward(fused, training);
  if (trace) trace->push_back({"st-gat", graph_display(st)});
  if (config.use_pooling) {
    st = st_pool.forward(st).graph;
    if (trace) trace->push_back({"st-pool", graph_display(st)});
  }
  auto node_values = st_proj.forward(st.nodes);  // (B, n, 1)
  if (trace)
    trace->push_back(
        {"st-projection", {node_values.dim(-1), node_values.dim(-2)}});
  auto logits =
      fc_out.forward(reshape(node_values, {batch, node_values.dim(-2)}));
  if (trace) trace->push_back({"output", {logits.dim(-1)}});
  return batched ? logits : reshape(logits, {logits.dim(-1)});
}

template <class S>
std::vector<std::pair<std::string, TensorT<S>>>
RawGatModelT<S>::named_parameters() {
  std::vector<std::pair<std::string, TensorT<S>>> out;
  auto add = [&out](std::string name, const TensorT<S>& t) {
    if (t.defined()) out.emplace_back(std::move(name), t);
  };
  auto add_gat = [&](const std::string& p, GatLayerT<S>& g) {
    add(p + ".w_map", g.w_map);
    add(p + ".att.weight", g.att.weight);
    add(p + ".att.bias", g.att.bias);
    add(p + ".res.weight", g.res.weight);
    add(p + ".res.bias", g.res.bias);
    add(p + ".bn.gamma", g.bn.gamma);
    add(p + ".bn.beta", g.bn.beta);
  };

  add("frontend.bn.gamma", frontend.bn.gamma);
  add("frontend.bn.beta", frontend.bn.beta);
  for (size_t b = 0; b < encoder.blocks.size(); ++b) {
    const std::string p = concat_msg("encoder.block", b);
    auto& blk = encoder.blocks[b];
    add(p + ".bn1.gamma", blk.bn1.gamma);
    add(p + ".bn1.beta", blk.bn1.beta);
    add(p + ".conv1.weight", blk.conv1.weight);
    add(p + ".conv1.bias", blk.conv1.bias);
    add(p + ".bn2.gamma", blk.bn2.gamma);
    add(p + ".bn2.beta", blk.bn2.beta);
    add(p + ".conv2.weight", blk.conv2.weight);
    add(p + ".conv2.bias", blk.conv2.bias);
    if (blk.has_skip) {
      add(p + ".skip.weight", blk.skip.weight);
      add(p + ".skip.bias", blk.skip.bias);
    }
  }
  if (config.use_spectral) {
    add_gat("spectral.gat", spec_gat);
    add("spectral.pool.q", spec_pool.q);
    add("spectral.proj.weight", spec_proj.weight);
    add("spectral.proj.bias", spec_proj.bias);
  }
  if (config.use_temporal) {
    add_gat("temporal.gat", temp_gat);
    add("temporal.pool.q", temp_pool.q);
    add("temporal.proj.weight", temp_proj.weight);
    add("temporal.proj.bias", temp_proj.bias);
  }
  add_gat("st.gat", st_gat);
  add("st.pool.q", st_pool.q);
  add("st.proj.weight", st_proj.weight);
  add("st.proj.bias", st_proj.bias);
  add("fc.weight", fc_out.weight);
  add("fc.bias", fc_out.bias);
  return out;
}

template <class S>
std::vector<std::pair<std::string, std::vector<S>*>>
RawGatModelT<S>::named_buffers() {
  std::vector<std::pair<std::string, std::vector<S>*>> out;
  auto add_bn = [&out](const std::string& p, BatchNormT<S>& bn) {
    out.emplace_back(p + ".running_mean", &bn.running_mean);
    out.emplace_back(p + ".running_var", &bn.running_var);
  };
  add_bn("frontend.bn", frontend.bn);
  for (size_t b = 0; b < encoder.blocks.size(); ++b) {
    const std::string p = concat_msg("encoder.block", b);
    add_bn(p + ".bn1", encoder.blocks[b].bn1);
    add_bn(p + ".bn2", encoder.blocks[b].bn2);
  }
  if (config.use_spectral) add_bn("spectral.gat.bn", spec_gat.bn);
  if (config.use_temporal) add_bn("temporal.gat.bn", temp_gat.bn);
  add_bn("st.gat.bn", st_gat.bn);
  return out;
}

template <class S>
std::int64_t RawGatModelT<S>::count_parameters() {
  std::int64_t total = 0;
  for (auto& [name, t] : named_parameters())
    if (t.requires_grad()) total += t.numel();
  return total;
}

namespace {

template <class T>
void write_raw(std::ofstream& os, const T& value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"num_filters", c.num_filters},
          {"kernel_length", c.kernel_length},
          {"input_length", c.input_length},
          {"sample_rate", c.sample_rate},
          {"fusion", to_string(c.fusion)},
          {"k_spec", c.k_spec},
          {"k_temp", c.k_temp},
          {"k_st", c.k_st},
          {"use_spectral", c.use_spectral},
          {"use_temporal", c.use_temporal},
          {"use_pooling", c.use_pooling},
          {"f_mask", c.f_mask},
          {"seed", c.seed}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.num_filters = j.at("num_filters").get<std::int64_t>();
    c.kernel_length = j.at("kernel_length").get<std::int64_t>();
    c.input_length = j.at("input_length").get<std::int64_t>();
    c.sample_rate = j.at("sample_rate").get<std::int64_t>();
    c.fusion = parse_fusion(j.at("fusion").get<std::string>());
    c.k_spec = j.at("k_spec").get<double>();
    c.k_temp = j.at("k_temp").get<double>();
    c.k_st = j.at("k_st").get<double>();
    c.use_spectral = j.at("use_spectral").get<bool>();
    c.use_temporal = j.at("use_temporal").get<bool>();
    c.use_pooling = j.at("use_pooling").get<bool>();
    c.f_mask = j.at("f_mask").get<std::int64_t>();
    c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io,
                concat_msg("checkpoint: malformed config record: ", e.what()));
  }
  return c;
}

}  // namespace

template <class S>
void RawGatModelT<S>::save_checkpoint(const std::string& path) {
  nlohmann::json header;
  header["format"] = "rawgat-checkpoint";
  header["version"] = kCheckpointVersion;
  header["seed"] = config.seed;
  header["config"] = config_to_json(config);

  std::vector<float> blob;
  nlohmann::json directory = nlohmann::json::array();
  auto append = [&](const std::string& name, const char* kind,
                    const Shape& shape, const std::vector<S>& values) {
    directory.push_back({{"name", name},
                         {"kind", kind},
                         {"shape", shape},
                         {"offset", blob.size() * sizeof(float)},
                         {"count", values.size()}});
    for (S v : values) blob.push_back(static_cast<float>(v));
  };
  for (auto& [name, t] : named_parameters())
    append(name, "param", t.shape(), t.data());
  for (auto& [name, vec] : named_buffers())
    append(name, "buffer",
           Shape{static_cast<std::int64_t>(vec->size())}, *vec);
  header["tensors"] = std::move(directory);

  const std::string body = header.dump();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    require(os.good(), ErrorKind::io,
            concat_msg("checkpoint: cannot open ", tmp, " for writing"));
    os.write(kMagic, sizeof(kMagic));
    write_raw(os, kCheckpointVersion);
    write_raw(os, static_cast<std::uint64_t>(body.size()));
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    os.write(reinterpret_cast<const char*>(blob.data()),
             static_cast<std::streamsize>(blob.size() * sizeof(float)));
    os.flush();
    require(os.good(), ErrorKind::io,
            concat_msg("checkpoint: write failed for ", tmp));
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw Error(ErrorKind::io,
                concat_msg("checkpoint: cannot move ", tmp, " to ", path));
  }
}

template <class S>
RawGatModelT<S> RawGatModelT<S>::load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), ErrorKind::io,
          concat_msg("checkpoint: cannot open ", path));

  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  require(is.good() && std::memcmp(magic, kMagic, sizeof(kMagic)) == 0,
          ErrorKind::io, concat_msg(path, " is not a checkpoint file"));
  std::uint32_t version = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof(version));
  require(is.good() && version == kCheckpointVersion, ErrorKind::io,
          concat_msg("checkpoint: unsupported version ", version));
  std::uint64_t header_len = 0;
  is.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  require(is.good() && header_len > 0 && header_len < (1u << 24),
          ErrorKind::io, "checkpoint: implausible header length");

  std::string body(header_len, '\0');
  is.read(body.data(), static_cast<std::streamsize>(header_len));
  require(is.good(), ErrorKind::io, "checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::io,
                concat_msg("checkpoint: corrupt header: ", e.what()));
  }
  require(header.value("format", "") == "rawgat-checkpoint", ErrorKind::io,
          "checkpoint: wrong format tag");

  RawGatModelT<S> model(config_from_json(header.at("config")));

  std::map<std::string, TensorT<S>> params;
  for (auto& [name, t] : model.named_parameters()) params.emplace(name, t);
  std::map<std::string, std::vector<S>*> buffers;
  for (auto& [name, vec] : model.named_buffers()) buffers.emplace(name, vec);

  std::vector<char> blob(std::istreambuf_iterator<char>(is), {});
  const size_t blob_floats = blob.size() / sizeof(float);

  size_t filled = 0;
  for (const auto& entry : header.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    const std::uint64_t offset = entry.at("offset").get<std::uint64_t>();
    const std::uint64_t count = entry.at("count").get<std::uint64_t>();
    require(offset % sizeof(float) == 0 &&
                offset / sizeof(float) + count <= blob_floats,
            ErrorKind::io,
            concat_msg("checkpoint: tensor ", name, " overruns the file"));
    std::vector<float> src(count);
    std::memcpy(src.data(), blob.data() + offset, count * sizeof(float));
    if (kind == "param") {
      auto it = params.find(name);
      require(it != params.end(), ErrorKind::config,
              concat_msg("checkpoint: unknown parameter ", name,
                         " (config mismatch?)"));
      const Shape shape = entry.at("shape").get<Shape>();
      require(shape == it->second.shape(), ErrorKind::config,
              concat_msg("checkpoint: parameter ", name, " has shape ",
                         shape_str(shape), ", model expects ",
                         shape_str(it->second.shape())));
      auto& dst = it->second.data();
      for (size_t i = 0; i < count; ++i) dst[i] = static_cast<S>(src[i]);
    } else if (kind == "buffer") {
      auto it = buffers.find(name);
      require(it != buffers.end(), ErrorKind::config,
              concat_msg("checkpoint: unknown buffer ", name));
      require(it->second->size() == count, ErrorKind::config,
              concat_msg("checkpoint: buffer ", name, " length mismatch"));
      for (size_t i = 0; i < count; ++i)
        (*it->second)[i] = static_cast<S>(src[i]);
    } else {
      throw Error(ErrorKind::io,
                  concat_msg("checkpoint: unknown tensor kind ", kind));
    }
    ++filled;
  }
  require(filled == params.size() + buffers.size(), ErrorKind::config,
          concat_msg("checkpoint: expected ", params.size() + buffers.size(),
                     " tensors, file provides ", filled));
  return model;
}

#define RAWGAT_INSTANTIATE_MODEL_OPS(S) template struct RawGatModelT<S>;

RAWGAT_INSTANTIATE_MODEL_OPS(float)
RAWGAT_INSTANTIATE_MODEL_OPS(double)
#undef RAWGAT_INSTANTIATE_MODEL_OPS

}  // namespace rawgat
