#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sure/backbone.hpp"
#include "sure/data.hpp"
#include "sure/evaluation.hpp"
#include "sure/propagation.hpp"
#include "sure/reconstruction.hpp"

namespace sure {

enum class Method {
  sure,
  sure_nll,
  sure_mcdropout,
  sure_ensemble,
  ablation_1a,
  ablation_1b,
  ablation_2a,
  ablation_2b,
  ablation_3,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::sure: return "sure";
    case Method::sure_nll: return "sure-nll";
    case Method::sure_mcdropout: return "sure-mcdropout";
    case Method::sure_ensemble: return "sure-ensemble";
    case Method::ablation_1a: return "ablation-1a";
    case Method::ablation_1b: return "ablation-1b";
    case Method::ablation_2a: return "ablation-2a";
    case Method::ablation_2b: return "ablation-2b";
    case Method::ablation_3: return "ablation-3";
  }
  return "sure";
}

inline Method method_from_string(const std::string& name) {
  for (Method m : {Method::sure, Method::sure_nll, Method::sure_mcdropout,
                   Method::sure_ensemble, Method::ablation_1a,
                   Method::ablation_1b, Method::ablation_2a,
                   Method::ablation_2b, Method::ablation_3}) {
    if (name == method_name(m)) return m;
  }
  throw std::invalid_argument("unknown method tag: " + name);
}

struct RunConfig {
  DatasetConfig dataset;
  double mask_fraction = 0.5;
  std::size_t pretrain_epochs = 30;
  double pretrain_lr = 1e-3;
  std::size_t phase1_epochs = 100;
  double phase1_lr = 1e-3;
  std::size_t phase2_epochs = 100;
  double phase2_lr = 1e-3;
  double lambda = 1.0;      // reconstruction-loss correlation weight
  double lambda_out = 1.0;  // phase-2 output-uncertainty weight
  std::size_t batch_size = 64;
  Method method = Method::sure;
  std::uint64_t seed = 0;
  std::size_t mc_passes = 20;        // T, sure-mcdropout
  std::size_t ensemble_members = 5;  // K, sure-ensemble
  double mcdropout_rate = 0.1;
  std::size_t latent_dim = 16;   // d
  std::size_t fused_dim = 32;    // d_f
  std::size_t head_hidden = 32;  // h
  std::size_t proj_hidden = 32;
  std::size_t fusion_hidden = 32;
  std::size_t rec_hidden = 0;    // 0 means 2 * latent_dim

  std::size_t effective_rec_hidden() const {
    return rec_hidden == 0 ? 2 * latent_dim : rec_hidden;
  }

  void validate() const {
    dataset.validate();
    if (mask_fraction < 0.0 || mask_fraction >= 1.0) {
      throw std::invalid_argument("RunConfig: mask_fraction out of [0, 1)");
    }
    if (phase1_epochs == 0 || phase2_epochs == 0 || pretrain_epochs == 0) {
      throw std::invalid_argument("RunConfig: epochs must be >= 1");
    }
    if (batch_size == 0) {
      throw std::invalid_argument("RunConfig: zero batch size");
    }
    if (lambda < 0.0 || lambda_out < 0.0) {
      throw std::invalid_argument("RunConfig: negative loss weight");
    }
    if (ensemble_members == 0 || mc_passes == 0) {
      throw std::invalid_argument("RunConfig: zero baseline passes/members");
    }
  }
};

template <typename BasicJson>
void to_json(BasicJson& j, const RunConfig& c) {
  to_json(j["dataset"], c.dataset);
  j["mask_fraction"] = c.mask_fraction;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["pretrain_lr"] = c.pretrain_lr;
  j["phase1_epochs"] = c.phase1_epochs;
  j["phase1_lr"] = c.phase1_lr;
  j["phase2_epochs"] = c.phase2_epochs;
  j["phase2_lr"] = c.phase2_lr;
  j["lambda"] = c.lambda;
  j["lambda_out"] = c.lambda_out;
  j["batch_size"] = c.batch_size;
  j["method"] = method_name(c.method);
  j["seed"] = c.seed;
  j["mc_passes"] = c.mc_passes;
  j["ensemble_members"] = c.ensemble_members;
  j["mcdropout_rate"] = c.mcdropout_rate;
  j["latent_dim"] = c.latent_dim;
  j["fused_dim"] = c.fused_dim;
  j["head_hidden"] = c.head_hidden;
  j["proj_hidden"] = c.proj_hidden;
  j["fusion_hidden"] = c.fusion_hidden;
  j["rec_hidden"] = c.rec_hidden;
}

template <typename BasicJson>
void from_json(const BasicJson& j, RunConfig& c) {
  from_json(j.at("dataset"), c.dataset);
  auto opt = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("mask_fraction", c.mask_fraction);
  opt("pretrain_epochs", c.pretrain_epochs);
  opt("pretrain_lr", c.pretrain_lr);
  opt("phase1_epochs", c.phase1_epochs);
  opt("phase1_lr", c.phase1_lr);
  opt("phase2_epochs", c.phase2_epochs);
  opt("phase2_lr", c.phase2_lr);
  opt("lambda", c.lambda);
  opt("lambda_out", c.lambda_out);
  opt("batch_size", c.batch_size);
  if (j.contains("method")) {
    c.method = method_from_string(j.at("method").template get<std::string>());
  }
  opt("seed", c.seed);
  opt("mc_passes", c.mc_passes);
  opt("ensemble_members", c.ensemble_members);
  opt("mcdropout_rate", c.mcdropout_rate);
  opt("latent_dim", c.latent_dim);
  opt("fused_dim", c.fused_dim);
  opt("head_hidden", c.head_hidden);
  opt("proj_hidden", c.proj_hidden);
  opt("fusion_hidden", c.fusion_hidden);
  opt("rec_hidden", c.rec_hidden);
}

// How a method tag alters the two-phase protocol.
struct MethodTraits {
  bool use_reconstruction = true;   // false: 1a, 1b
  bool drop_incomplete = false;     // 1a
  bool use_propagation = true;      // false: 2a, 2b, 1a, 1b, mc, ensemble
  enum class UncLoss { pcc, nll, none } unc_loss = UncLoss::pcc;
  bool rec_loss_nll = false;        // sure-nll trains phase 1 with NLL
  double lambda = 1.0;              // effective phase-1 weight
  double lambda_out = 1.0;          // effective phase-2 weight
  bool pretrain = true;             // false: ablation-3
  bool train_backbone = false;      // true: ablation-3
  bool mc_dropout = false;
  bool ensemble_eval = false;
  bool emit_uncertainty = true;     // false: 2a
};

inline MethodTraits method_traits(const RunConfig& cfg) {
  MethodTraits t;
  t.lambda = cfg.lambda;
  t.lambda_out = cfg.lambda_out;
  switch (cfg.method) {
    case Method::sure:
      break;
    case Method::sure_nll:
      t.unc_loss = MethodTraits::UncLoss::nll;
      t.rec_loss_nll = true;
      break;
    case Method::sure_mcdropout:
      t.lambda = 0.0;
      t.lambda_out = 0.0;
      t.unc_loss = MethodTraits::UncLoss::none;
      t.use_propagation = false;
      t.mc_dropout = true;
      break;
    case Method::sure_ensemble:
      t.lambda = 0.0;
      t.lambda_out = 0.0;
      t.unc_loss = MethodTraits::UncLoss::none;
      t.use_propagation = false;
      t.ensemble_eval = true;
      break;
    case Method::ablation_1a:
      t.use_reconstruction = false;
      t.drop_incomplete = true;
      t.use_propagation = false;
      break;
    case Method::ablation_1b:
      t.use_reconstruction = false;
      t.use_propagation = false;
      break;
    case Method::ablation_2a:
      t.lambda = 0.0;
      t.lambda_out = 0.0;
      t.unc_loss = MethodTraits::UncLoss::none;
      t.use_propagation = false;
      t.emit_uncertainty = false;
      break;
    case Method::ablation_2b:
      t.lambda = 0.0;
      t.use_propagation = false;
      break;
    case Method::ablation_3:
      t.pretrain = false;
      t.train_backbone = true;
      break;
  }
  return t;
}

struct ModelBundle {
  Backbone backbone;
  std::vector<Reconstructor> reconstructors;
  ClassifierHead head;
  std::vector<ClassifierHead> ensemble;  // sure-ensemble extra members
};

inline HeadConfig head_config(const RunConfig& cfg) {
  HeadConfig hc;
  hc.fused_dim = cfg.fused_dim;
  hc.hidden = cfg.head_hidden;
  hc.out_dim = cfg.dataset.label_dim();
  hc.trunk_dropout =
      cfg.method == Method::sure_mcdropout ? cfg.mcdropout_rate : 0.0;
  return hc;
}

inline ModelBundle init_bundle(const RunConfig& cfg, Rng& rng) {
  ModelBundle bundle;
  BackboneConfig bc;
  bc.modality_dims = cfg.dataset.modality_dims;
  bc.latent_dim = cfg.latent_dim;
  bc.fused_dim = cfg.fused_dim;
  bc.proj_hidden = cfg.proj_hidden;
  bc.fusion_hidden = cfg.fusion_hidden;
  bundle.backbone = Backbone::init(bc, rng);
  for (std::size_t m = 0; m < cfg.dataset.modalities; ++m) {
    bundle.reconstructors.push_back(
        Reconstructor::init(cfg.dataset.modalities, m, cfg.latent_dim,
                            cfg.effective_rec_hidden(), rng));
  }
  bundle.head = ClassifierHead::init(head_config(cfg), rng);
  return bundle;
}

struct Phase1Result {
  std::size_t trained_pairs = 0;        // distinct (target, source) pairs
  std::size_t skipped_batches = 0;      // pair-batches without usable rows
  std::vector<double> epoch_losses;     // mean total loss per epoch
};

// Algorithm phase 1: every ordered (target, source) pair of modalities is
// trained on the rows where both are present. The backbone stays fixed, so
// latents enter the graphs as constants.
inline Phase1Result train_phase1(const RunConfig& cfg,
                                 const MethodTraits& traits,
                                 const ModalBatch& train,
                                 const Backbone& backbone,
                                 std::vector<Reconstructor>& reconstructors,
                                 Rng& rng) {
  Phase1Result result;
  if (!traits.use_reconstruction) {
    return result;
  }
  const std::size_t m_count = train.modality_count();
  const std::size_t n = train.batch_size();
  std::vector<Tensor> latents = project(backbone, train);

  Adam opt(cfg.phase1_lr);
  std::set<std::pair<std::size_t, std::size_t>> pairs_seen;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t loss_terms = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      Graph g;
      std::vector<BoundParam> bound;
      std::optional<NodeId> total;
      for (std::size_t target = 0; target < m_count; ++target) {
        for (std::size_t source = 0; source < m_count; ++source) {
          if (source == target) continue;
          std::vector<std::size_t> rows;
          for (std::size_t k = start; k < stop; ++k) {
            const std::size_t row = order[k];
            if (train.is_present(row, target) &&
                train.is_present(row, source)) {
              rows.push_back(row);
            }
          }
          if (rows.size() < 2) {
            ++result.skipped_batches;
            continue;
          }
          Tensor z_src(rows.size(), cfg.latent_dim);
          Tensor z_tgt(rows.size(), cfg.latent_dim);
          for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
              z_src(i, j) = latents[source](rows[i], j);
              z_tgt(i, j) = latents[target](rows[i], j);
            }
          }
          Reconstructor::Nodes nodes = reconstructors[target].forward(
              g, g.constant(std::move(z_src)), source, &bound);
          NodeId pair_loss;
          if (traits.rec_loss_nll && traits.lambda > 0.0) {
            // Gaussian-NLL variant: mse + lambda * nll(sigma2, errors).
            NodeId diff = g.sub(nodes.mean, g.constant(z_tgt));
            NodeId mse = g.scale(g.sum(g.square(diff)),
                                 1.0 / static_cast<double>(rows.size()));
            NodeId eps2 = g.scale(row_sum(g, g.square(diff)),
                                  1.0 / static_cast<double>(cfg.latent_dim));
            pair_loss = g.add(
                mse, g.scale(nll_from_errors(g, eps2, nodes.sigma2),
                             traits.lambda));
          } else {
            RecLoss loss = rec_loss(g, nodes.mean, z_tgt, nodes.sigma2,
                                    traits.lambda);
            pair_loss = loss.total;
          }
          total = total ? g.add(*total, pair_loss) : pair_loss;
          pairs_seen.insert({target, source});
          epoch_loss += g.value(pair_loss).item();
          ++loss_terms;
        }
      }
      if (total) {
        g.backward(*total);
        opt.step(g, bound);
      }
    }
    result.epoch_losses.push_back(
        loss_terms > 0 ? epoch_loss / static_cast<double>(loss_terms) : 0.0);
  }
  result.trained_pairs = pairs_seen.size();
  for (Reconstructor& rec : reconstructors) rec.freeze();
  return result;
}

// Latents with reconstructed (or zero) stand-ins for missing modalities,
// plus the per-modality reconstruction variances used for propagation.
struct FilledLatents {
  std::vector<Tensor> latents;     // (B, d) per modality
  std::vector<Tensor> rec_sigma2;  // (B, 1) per modality, zero where unused
  std::vector<std::vector<std::size_t>> row_missing;  // per row
};

inline FilledLatents fill_latents(const RunConfig& cfg,
                                  const MethodTraits& traits,
                                  const ModelBundle& bundle,
                                  const ModalBatch& batch) {
  FilledLatents out;
  out.latents = project(bundle.backbone, batch);
  const std::size_t n = batch.batch_size();
  const std::size_t m_count = batch.modality_count();
  out.rec_sigma2.assign(m_count, Tensor(n, 1));
  out.row_missing.resize(n);

  // Group rows by presence pattern so reconstruction runs batched.
  std::map<std::vector<std::uint8_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::uint8_t> pattern(m_count);
    bool any_missing = false;
    for (std::size_t m = 0; m < m_count; ++m) {
      pattern[m] = batch.is_present(i, m) ? 1 : 0;
      if (!pattern[m]) {
        any_missing = true;
        out.row_missing[i].push_back(m);
      }
    }
    if (any_missing) groups[pattern].push_back(i);
  }
  if (!traits.use_reconstruction) {
    return out;  // zero latents stand in for missing modalities
  }
  for (const auto& [pattern, rows] : groups) {
    std::vector<std::size_t> available;
    for (std::size_t m = 0; m < m_count; ++m) {
      if (pattern[m]) available.push_back(m);
    }
    std::vector<Tensor> sub(m_count);
    for (std::size_t m : available) {
      Tensor t(rows.size(), cfg.latent_dim);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
          t(i, j) = out.latents[m](rows[i], j);
        }
      }
      sub[m] = std::move(t);
    }
    for (std::size_t m = 0; m < m_count; ++m) {
      if (pattern[m]) continue;
      ReconAverage avg = reconstruct_average(bundle.reconstructors, sub,
                                             available, m);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
          out.latents[m](rows[i], j) = avg.mean(i, j);
        }
        out.rec_sigma2[m](rows[i], 0) = avg.sigma2(i, 0);
      }
    }
  }
  return out;
}

// Pattern-grouped first-order propagation over rows with mixed missing sets.
inline Tensor propagate_mixed(const MethodTraits& traits, Backbone& backbone,
                              ClassifierHead& head,
                              const FilledLatents& filled) {
  const std::size_t n = filled.latents[0].rows();
  Tensor out(n, 1);
  if (!traits.use_propagation) return out;
  std::map<std::vector<std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < n; ++i) {
    if (!filled.row_missing[i].empty()) {
      groups[filled.row_missing[i]].push_back(i);
    }
  }
  const std::size_t m_count = filled.latents.size();
  for (const auto& [missing, rows] : groups) {
    std::vector<Tensor> latents(m_count);
    std::vector<Tensor> sigmas(m_count);
    for (std::size_t m = 0; m < m_count; ++m) {
      Tensor t(rows.size(), filled.latents[m].cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < t.cols(); ++j) {
          t(i, j) = filled.latents[m](rows[i], j);
        }
      }
      latents[m] = std::move(t);
    }
    for (std::size_t m : missing) {
      Tensor s(rows.size(), 1);
      for (std::size_t i = 0; i < rows.size(); ++i) {
        s(i, 0) = filled.rec_sigma2[m](rows[i], 0);
      }
      sigmas[m] = std::move(s);
    }
    Tensor part = propagate(backbone, head, latents, missing, sigmas);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out(rows[i], 0) = part(i, 0);
    }
  }
  return out;
}

struct Phase2Result {
  std::vector<double> convergence;  // held-out pearson per epoch
};

namespace detail {

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Tensor out(rows.size(), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out(i, j) = t(rows[i], j);
  }
  return out;
}

}  // namespace detail

// Algorithm phase 2: reconstruction modules stay frozen; the head (and, for
// the from-scratch ablation, the backbone) trains on the downstream loss plus
// the output-uncertainty loss over sigma2_Y = sigma2_input + sigma2_omega.
// sigma2_input is computed once per sample up front and enters the loss as a
// constant, so no second-order derivatives are ever needed.
inline Phase2Result train_phase2(const RunConfig& cfg,
                                 const MethodTraits& traits,
                                 ModelBundle& bundle, ClassifierHead& head,
                                 const ModalBatch& train,
                                 const ModalBatch& holdout, Rng& rng) {
  for (const Reconstructor& rec : bundle.reconstructors) {
    if (traits.use_reconstruction && !rec.frozen()) {
      throw std::logic_error("train_phase2: reconstructors must be frozen");
    }
  }
  Phase2Result result;
  const std::size_t n = train.batch_size();
  const Task task = cfg.dataset.task;

  FilledLatents train_filled = fill_latents(cfg, traits, bundle, train);
  FilledLatents hold_filled = fill_latents(cfg, traits, bundle, holdout);
  // Input-induced variances are cached at phase-2 start and held constant
  // for the whole phase.
  Tensor train_sigma2_input =
      propagate_mixed(traits, bundle.backbone, head, train_filled);
  Tensor hold_sigma2_input =
      propagate_mixed(traits, bundle.backbone, head, hold_filled);

  Adam opt(cfg.phase2_lr);
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < cfg.phase2_epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::vector<std::size_t> rows(order.begin() + start,
                                    order.begin() + stop);
      if (rows.size() < 2) continue;
      Graph g;
      std::vector<BoundParam> bound;
      std::vector<NodeId> latent_nodes;
      if (traits.train_backbone) {
        // From-scratch ablation: projector outputs stay in the graph; the
        // reconstruction fill enters as constants through a presence mask.
        ModalBatch mini = train.select_rows(rows);
        FilledLatents fresh = fill_latents(cfg, traits, bundle, mini);
        for (std::size_t m = 0; m < mini.modality_count(); ++m) {
          NodeId proj = bundle.backbone.projectors[m].forward(
              g, g.input(mini.x[m]), false, nullptr, &bound);
          Tensor present_mask(rows.size(), cfg.latent_dim);
          Tensor fill(rows.size(), cfg.latent_dim);
          for (std::size_t i = 0; i < rows.size(); ++i) {
            const bool present = mini.is_present(i, m);
            for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
              present_mask(i, j) = present ? 1.0 : 0.0;
              fill(i, j) = present ? 0.0 : fresh.latents[m](i, j);
            }
          }
          latent_nodes.push_back(g.add(
              g.mul(proj, g.constant(std::move(present_mask))),
              g.constant(std::move(fill))));
        }
      } else {
        for (std::size_t m = 0; m < train.modality_count(); ++m) {
          latent_nodes.push_back(
              g.constant(detail::gather_rows(train_filled.latents[m], rows)));
        }
      }
      const bool stochastic = traits.mc_dropout;
      PredictNodes pred = fuse_predict(g, bundle.backbone, head, latent_nodes,
                                       stochastic, &rng, &bound);
      Tensor labels = detail::gather_rows(train.labels, rows);
      Downstream down = downstream_loss(g, task, pred.prediction, labels);
      NodeId total = down.loss;
      if (traits.unc_loss != MethodTraits::UncLoss::none &&
          traits.lambda_out > 0.0) {
        NodeId sigma2_y = g.add(
            g.constant(detail::gather_rows(train_sigma2_input, rows)),
            pred.sigma2_omega);
        if (traits.unc_loss == MethodTraits::UncLoss::pcc) {
          PccLoss pcc = pcc_loss(g, sigma2_y, g.value(down.per_sample));
          total = g.add(total, g.scale(pcc.node, traits.lambda_out));
        } else {
          NodeId nll = nll_from_errors(g, down.per_sample, sigma2_y);
          total = g.add(total, g.scale(nll, traits.lambda_out));
        }
      }
      g.backward(total);
      opt.step(g, bound);
    }

    // Held-out correlation between total uncertainty and realized error.
    if (traits.train_backbone) {
      hold_filled = fill_latents(cfg, traits, bundle, holdout);
    }
    PredictValues hold_pred =
        fuse_predict_value(bundle.backbone, head, hold_filled.latents);
    Tensor errors = per_sample_error(task, hold_pred.prediction,
                                     holdout.labels);
    std::vector<double> sigma2(holdout.batch_size());
    std::vector<double> eps2(holdout.batch_size());
    for (std::size_t i = 0; i < holdout.batch_size(); ++i) {
      sigma2[i] = hold_sigma2_input(i, 0) + hold_pred.sigma2_omega(i, 0);
      eps2[i] = errors(i, 0);
    }
    if (traits.emit_uncertainty && sigma2.size() >= 2) {
      result.convergence.push_back(pearson(sigma2, eps2).r);
    } else {
      result.convergence.push_back(0.0);
    }
  }
  return result;
}


// ---------------------------------------------------------------------------
// Evaluation records and run artifacts
// ---------------------------------------------------------------------------

struct ScenarioRecords {
  std::string name;
  std::vector<std::size_t> missing;
  Tensor predictions;   // (N, out) raw scores; ensemble reports member mean
  Tensor sigma2_input;  // (N, 1)
  Tensor sigma2_omega;  // (N, 1)
  Tensor sigma2_total;  // (N, 1)
  Tensor errors;        // (N, 1) realized per-sample error
  Tensor labels;        // copy of the evaluated batch labels
  std::vector<bool> correct;                   // classification only
  std::map<std::size_t, Tensor> recon_sigma2;  // per reconstructed modality
  std::map<std::size_t, Tensor> recon_error;   // mean over latent coords
  bool has_uncertainty = true;
};

inline std::string scenario_name(const std::vector<std::size_t>& missing) {
  if (missing.empty()) return "full";
  std::string name = "missing=";
  for (std::size_t i = 0; i < missing.size(); ++i) {
    if (i) name += ',';
    name += std::to_string(missing[i]);
  }
  return name;
}

// Full input, every single-missing set, and every single-available set.
inline std::vector<std::vector<std::size_t>> default_scenarios(
    std::size_t modalities) {
  std::set<std::vector<std::size_t>> sets;
  sets.insert({});
  for (std::size_t m = 0; m < modalities; ++m) {
    sets.insert({m});
    std::vector<std::size_t> complement;
    for (std::size_t o = 0; o < modalities; ++o) {
      if (o != m) complement.push_back(o);
    }
    sets.insert(complement);
  }
  return {sets.begin(), sets.end()};
}

// Records for one batch under its own presence pattern. `truth_latents`
// enables per-modality reconstruction errors when the unmasked inputs are
// known (test scenarios).
inline ScenarioRecords evaluate_batch(const RunConfig& cfg,
                                      const MethodTraits& traits,
                                      ModelBundle& bundle,
                                      const ModalBatch& batch,
                                      const std::vector<Tensor>* truth_latents,
                                      std::string name,
                                      std::vector<std::size_t> missing,
                                      Rng& rng) {
  ScenarioRecords rec;
  rec.name = std::move(name);
  rec.missing = std::move(missing);
  rec.has_uncertainty = traits.emit_uncertainty;
  const std::size_t n = batch.batch_size();
  const Task task = cfg.dataset.task;

  FilledLatents filled = fill_latents(cfg, traits, bundle, batch);
  rec.sigma2_input =
      propagate_mixed(traits, bundle.backbone, bundle.head, filled);

  if (traits.ensemble_eval && !bundle.ensemble.empty()) {
    const std::size_t k_members = bundle.ensemble.size();
    Tensor mean;
    std::vector<PredictValues> member_out;
    member_out.reserve(k_members);
    for (ClassifierHead& member : bundle.ensemble) {
      member_out.push_back(
          fuse_predict_value(bundle.backbone, member, filled.latents));
    }
    mean = member_out[0].prediction;
    for (std::size_t k = 1; k < k_members; ++k) {
      for (std::size_t i = 0; i < mean.size(); ++i) {
        mean.values()[i] += member_out[k].prediction.values()[i];
      }
    }
    for (double& v : mean.values()) {
      v /= static_cast<double>(k_members);
    }
    rec.predictions = mean;
    rec.sigma2_omega = Tensor(n, 1);
    // Population variance across members, summed over output components,
    // so a single member reports exactly zero.
    for (std::size_t i = 0; i < n; ++i) {
      double var = 0.0;
      for (std::size_t o = 0; o < mean.cols(); ++o) {
        for (std::size_t k = 0; k < k_members; ++k) {
          const double dev = member_out[k].prediction(i, o) - mean(i, o);
          var += dev * dev;
        }
      }
      rec.sigma2_omega(i, 0) = var / static_cast<double>(k_members);
    }
  } else if (traits.mc_dropout) {
    PredictValues det =
        fuse_predict_value(bundle.backbone, bundle.head, filled.latents);
    rec.predictions = det.prediction;
    rec.sigma2_omega = Tensor(n, 1);
    const std::size_t passes = cfg.mc_passes;
    const std::size_t out_dim = det.prediction.cols();
    // Shifted accumulation: a dropout rate of zero yields exactly zero.
    std::vector<double> first(n * out_dim, 0.0);
    std::vector<double> s1(n * out_dim, 0.0);
    std::vector<double> s2(n * out_dim, 0.0);
    for (std::size_t t = 0; t < passes; ++t) {
      Graph g;
      std::vector<NodeId> ids;
      for (const Tensor& z : filled.latents) ids.push_back(g.input(z));
      PredictNodes nodes =
          fuse_predict(g, bundle.backbone, bundle.head, ids, true, &rng);
      const Tensor& pred = g.value(nodes.prediction);
      for (std::size_t i = 0; i < n * out_dim; ++i) {
        const double v = pred.values()[i];
        if (t == 0) first[i] = v;
        const double dev = v - first[i];
        s1[i] += dev;
        s2[i] += dev * dev;
      }
    }
    const double dp = static_cast<double>(passes);
    for (std::size_t i = 0; i < n; ++i) {
      double var = 0.0;
      for (std::size_t o = 0; o < out_dim; ++o) {
        const std::size_t idx = i * out_dim + o;
        var += (s2[idx] - s1[idx] * s1[idx] / dp) / (dp - 1.0);
      }
      rec.sigma2_omega(i, 0) = std::max(0.0, var);
    }
  } else {
    PredictValues det =
        fuse_predict_value(bundle.backbone, bundle.head, filled.latents);
    rec.predictions = det.prediction;
    rec.sigma2_omega = det.sigma2_omega;
  }

  rec.sigma2_total = combine(rec.sigma2_input, rec.sigma2_omega);
  rec.errors = per_sample_error(task, rec.predictions, batch.labels);
  rec.labels = batch.labels;
  if (task == Task::classification) {
    rec.correct.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      rec.correct[i] = argmax_row(rec.predictions, i) ==
                       argmax_row(batch.labels, i);
    }
  }
  if (truth_latents != nullptr && traits.use_reconstruction) {
    for (std::size_t m : rec.missing) {
      rec.recon_sigma2[m] = filled.rec_sigma2[m];
      Tensor err(n, 1);
      for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < cfg.latent_dim; ++j) {
          const double d =
              filled.latents[m](i, j) - (*truth_latents)[m](i, j);
          total += d * d;
        }
        err(i, 0) = total / static_cast<double>(cfg.latent_dim);
      }
      rec.recon_error[m] = std::move(err);
    }
  }
  return rec;
}

// Records for one missing-modality scenario over a full-modality test split.
inline ScenarioRecords evaluate_scenario(const RunConfig& cfg,
                                         const MethodTraits& traits,
                                         ModelBundle& bundle,
                                         const ModalBatch& test_full,
                                         const std::vector<std::size_t>& missing,
                                         Rng& rng) {
  ModalBatch masked = test_full;
  for (std::size_t i = 0; i < masked.batch_size(); ++i) {
    for (std::size_t m : missing) masked.set_present(i, m, false);
  }
  std::vector<Tensor> truth = project(bundle.backbone, test_full);
  return evaluate_batch(cfg, traits, bundle, masked, &truth,
                        scenario_name(missing), missing, rng);
}

// ---------------------------------------------------------------------------
// File output
// ---------------------------------------------------------------------------

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(hash));
  return buf;
}

inline constexpr const char* kToolVersion = "0.1.0";

inline void write_manifest(const std::filesystem::path& dir,
                           const RunConfig& cfg) {
  nlohmann::ordered_json cfg_json;
  to_json(cfg_json, cfg);
  nlohmann::ordered_json manifest;
  manifest["config_hash"] = fnv1a_hex(cfg_json.dump());
  manifest["seed"] = cfg.seed;
  manifest["tool_version"] = kToolVersion;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

inline void write_convergence_csv(const std::filesystem::path& path,
                                  const std::vector<double>& convergence) {
  std::ofstream out(path);
  out << "epoch,pearson\n";
  for (std::size_t i = 0; i < convergence.size(); ++i) {
    out << i << ',' << detail::format_double(convergence[i]) << '\n';
  }
}

inline void write_records_csv(const std::filesystem::path& path,
                              const RunConfig& cfg,
                              const std::vector<ScenarioRecords>& scenarios) {
  std::ofstream out(path);
  out << "scenario,sample,pred,label,correct,error,sigma2_input,sigma2_omega,"
         "sigma2_total";
  for (std::size_t m = 0; m < cfg.dataset.modalities; ++m) {
    out << ",recon_sigma2_m" << m << ",recon_err_m" << m;
  }
  out << '\n';
  const bool classify = cfg.dataset.task == Task::classification;
  for (const ScenarioRecords& rec : scenarios) {
    const std::size_t n = rec.predictions.rows();
    for (std::size_t i = 0; i < n; ++i) {
      out << rec.name << ',' << i << ',';
      if (classify) {
        out << argmax_row(rec.predictions, i) << ','
            << argmax_row(rec.labels, i) << ',';
      } else {
        out << detail::format_double(rec.predictions(i, 0)) << ','
            << detail::format_double(rec.labels(i, 0)) << ',';
      }
      if (classify) {
        out << (rec.correct[i] ? 1 : 0);
      }
      out << ',' << detail::format_double(rec.errors(i, 0));
      if (rec.has_uncertainty) {
        out << ',' << detail::format_double(rec.sigma2_input(i, 0)) << ','
            << detail::format_double(rec.sigma2_omega(i, 0)) << ','
            << detail::format_double(rec.sigma2_total(i, 0));
      } else {
        out << ",,,";
      }
      for (std::size_t m = 0; m < cfg.dataset.modalities; ++m) {
        auto s_it = rec.recon_sigma2.find(m);
        auto e_it = rec.recon_error.find(m);
        out << ',';
        if (s_it != rec.recon_sigma2.end()) {
          out << detail::format_double(s_it->second(i, 0));
        }
        out << ',';
        if (e_it != rec.recon_error.end()) {
          out << detail::format_double(e_it->second(i, 0));
        }
      }
      out << '\n';
    }
  }
}


// ---------------------------------------------------------------------------
// Summary metrics
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<double> column(const Tensor& t) {
  return t.values();
}

inline double pooled_pearson(const std::vector<double>& a,
                             const std::vector<double>& b) {
  if (a.size() < 2) return 0.0;
  PearsonResult r = pearson(a, b);
  return r.degenerate ? 0.0 : r.r;
}

}  // namespace detail

// Aggregates per-scenario and pooled metrics. `calibration` carries the
// training-time uncertainty/error statistics for the UCE rescaling; it is
// ignored when the method emits no uncertainty.
inline nlohmann::ordered_json build_summary(
    const RunConfig& cfg, const std::vector<ScenarioRecords>& scenarios,
    const std::vector<double>& convergence, const Phase1Result& phase1,
    const std::optional<CalibrationStats>& calibration) {
  const bool classify = cfg.dataset.task == Task::classification;
  nlohmann::ordered_json summary;
  summary["method"] = method_name(cfg.method);
  summary["task"] = classify ? "classification" : "regression";
  summary["seed"] = cfg.seed;
  summary["phase1_pairs_trained"] = phase1.trained_pairs;
  summary["phase2_epochs_logged"] = convergence.size();
  summary["convergence_final"] =
      convergence.empty() ? 0.0 : convergence.back();

  nlohmann::ordered_json per_scenario;
  std::vector<double> pooled_sigma2;
  std::vector<double> pooled_err;
  std::vector<bool> pooled_correct;
  std::vector<double> pooled_recon_sigma2;
  std::vector<double> pooled_recon_err;
  double acc_sum = 0.0;
  double mae_sum = 0.0;

  for (const ScenarioRecords& rec : scenarios) {
    nlohmann::ordered_json entry;
    TaskMetrics metrics =
        task_metrics(cfg.dataset.task, rec.predictions, rec.labels);
    if (classify) {
      entry["accuracy"] = metrics.accuracy;
      entry["macro_f1"] = metrics.macro_f1;
      acc_sum += metrics.accuracy;
    } else {
      entry["mae"] = metrics.mae;
      entry["corr"] = metrics.corr;
      mae_sum += metrics.mae;
    }
    if (rec.has_uncertainty) {
      std::vector<double> sigma2 = rec.sigma2_total.values();
      std::vector<double> errors = rec.errors.values();
      entry["output_uncertainty_corr"] =
          detail::pooled_pearson(sigma2, errors);
      if (calibration) {
        std::vector<double> scaled = calibrate(sigma2, *calibration);
        entry["uce"] = uce(scaled, errors);
      }
      double max_input = 0.0;
      for (double v : rec.sigma2_input.values()) {
        max_input = std::max(max_input, v);
      }
      entry["sigma2_input_max"] = max_input;
    } else {
      entry["output_uncertainty_corr"] = nullptr;
      entry["uce"] = nullptr;
    }
    if (!rec.recon_sigma2.empty()) {
      std::vector<double> rs;
      std::vector<double> re;
      for (const auto& [m, s] : rec.recon_sigma2) {
        const Tensor& e = rec.recon_error.at(m);
        rs.insert(rs.end(), s.values().begin(), s.values().end());
        re.insert(re.end(), e.values().begin(), e.values().end());
      }
      entry["recon_uncertainty_corr"] = detail::pooled_pearson(rs, re);
    }
    // Single-available scenarios feed the pooled uncertainty metrics.
    if (rec.missing.size() + 1 == cfg.dataset.modalities) {
      if (rec.has_uncertainty) {
        const auto& s = rec.sigma2_total.values();
        const auto& e = rec.errors.values();
        pooled_sigma2.insert(pooled_sigma2.end(), s.begin(), s.end());
        pooled_err.insert(pooled_err.end(), e.begin(), e.end());
        pooled_correct.insert(pooled_correct.end(), rec.correct.begin(),
                              rec.correct.end());
      }
      for (const auto& [m, s] : rec.recon_sigma2) {
        const Tensor& e = rec.recon_error.at(m);
        pooled_recon_sigma2.insert(pooled_recon_sigma2.end(),
                                   s.values().begin(), s.values().end());
        pooled_recon_err.insert(pooled_recon_err.end(), e.values().begin(),
                                e.values().end());
      }
    }
    per_scenario[rec.name] = std::move(entry);
  }
  summary["scenarios"] = std::move(per_scenario);

  nlohmann::ordered_json pooled;
  if (classify) {
    pooled["mean_accuracy"] =
        acc_sum / static_cast<double>(scenarios.size());
  } else {
    pooled["mean_mae"] = mae_sum / static_cast<double>(scenarios.size());
  }
  if (!pooled_sigma2.empty()) {
    pooled["unimodal_output_uncertainty_corr"] =
        detail::pooled_pearson(pooled_sigma2, pooled_err);
  }
  if (!pooled_recon_sigma2.empty()) {
    pooled["unimodal_recon_uncertainty_corr"] =
        detail::pooled_pearson(pooled_recon_sigma2, pooled_recon_err);
  }
  if (classify && !pooled_sigma2.empty()) {
    std::size_t hits = 0;
    for (bool c : pooled_correct) hits += c ? 1 : 0;
    pooled["unimodal_accuracy"] =
        static_cast<double>(hits) / static_cast<double>(pooled_correct.size());
    std::vector<double> qs{0.65};
    auto rows = deferral_analysis(pooled_sigma2, pooled_correct, qs);
    if (rows[0].retained_accuracy) {
      pooled["retained_accuracy_q65"] = *rows[0].retained_accuracy;
    }
    if (rows[0].tdr_recall) pooled["tdr_recall_q65"] = *rows[0].tdr_recall;
    if (rows[0].fdr_recall) pooled["fdr_recall_q65"] = *rows[0].fdr_recall;
  }
  summary["pooled"] = std::move(pooled);
  return summary;
}

// ---------------------------------------------------------------------------
// Checkpoints and the run driver
// ---------------------------------------------------------------------------

inline std::vector<NamedParam> bundle_params(ModelBundle& bundle) {
  std::vector<NamedParam> params;
  bundle.backbone.collect_params(params);
  for (std::size_t m = 0; m < bundle.reconstructors.size(); ++m) {
    bundle.reconstructors[m].collect_params(
        "reconstructor" + std::to_string(m), params);
  }
  bundle.head.collect_params("head", params);
  for (std::size_t k = 0; k < bundle.ensemble.size(); ++k) {
    bundle.ensemble[k].collect_params("member" + std::to_string(k), params);
  }
  return params;
}

inline void save_bundle(const std::filesystem::path& dir,
                        ModelBundle& bundle) {
  std::vector<NamedParam> params = bundle_params(bundle);
  std::ofstream out(dir / "model.ckpt.json");
  out << checkpoint_save(params).dump() << '\n';
}

struct RunArtifacts {
  std::filesystem::path dir;
  RunConfig config;
  Phase1Result phase1;
  std::size_t phase2_rows = 0;  // rows that actually trained in phase 2
  std::vector<double> convergence;
  std::vector<ScenarioRecords> scenarios;
  nlohmann::ordered_json summary;
  ModelBundle bundle;
};

// Runs the configured method end to end: data synthesis, (optional)
// pretraining, the two training phases, per-scenario evaluation, and the
// artifact files. A pre-trained frozen backbone can be shared across runs.
inline RunArtifacts run_training(const RunConfig& cfg,
                                 const std::filesystem::path& out_dir,
                                 const Backbone* shared_backbone = nullptr) {
  cfg.validate();
  const MethodTraits traits = method_traits(cfg);

  Rng master(cfg.seed);
  const std::uint64_t seed_init = master.next_u64();
  const std::uint64_t seed_pretrain = master.next_u64();
  const std::uint64_t seed_mask = master.next_u64();
  const std::uint64_t seed_holdout = master.next_u64();
  const std::uint64_t seed_phase1 = master.next_u64();
  const std::uint64_t seed_phase2 = master.next_u64();
  const std::uint64_t seed_eval = master.next_u64();
  const std::uint64_t seed_ensemble = master.next_u64();

  DatasetSplits data = generate(cfg.dataset);
  Rng rng_init(seed_init);
  ModelBundle bundle = init_bundle(cfg, rng_init);

  if (traits.pretrain) {
    if (shared_backbone != nullptr) {
      if (!shared_backbone->frozen()) {
        throw std::invalid_argument("run_training: shared backbone must be "
                                    "pretrained and frozen");
      }
      bundle.backbone = *shared_backbone;
    } else {
      Rng rng_pre(seed_pretrain);
      ClassifierHead throwaway =
          ClassifierHead::init(head_config(cfg), rng_pre);
      PretrainConfig pc;
      pc.epochs = cfg.pretrain_epochs;
      pc.lr = cfg.pretrain_lr;
      pc.batch_size = cfg.batch_size;
      pretrain(bundle.backbone, throwaway, data.pretrain, cfg.dataset.task,
               pc, rng_pre);
    }
  }

  ModalBatch masked = apply_masks(data.finetune, cfg.mask_fraction, seed_mask);

  // Fixed 20% held-out slice for the convergence log.
  Rng rng_holdout(seed_holdout);
  std::vector<std::size_t> order(masked.batch_size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng_holdout.shuffle(order);
  const std::size_t hold_count = std::max<std::size_t>(2, order.size() / 5);
  std::vector<std::size_t> hold_rows(order.begin(),
                                     order.begin() + hold_count);
  std::vector<std::size_t> train_rows(order.begin() + hold_count,
                                      order.end());
  ModalBatch holdout = masked.select_rows(hold_rows);
  ModalBatch train_slice = masked.select_rows(train_rows);

  Rng rng_phase1(seed_phase1);
  Phase1Result phase1 = train_phase1(cfg, traits, train_slice,
                                     bundle.backbone, bundle.reconstructors,
                                     rng_phase1);

  ModalBatch phase2_slice = train_slice;
  if (traits.drop_incomplete) {
    std::vector<std::size_t> complete;
    for (std::size_t i = 0; i < train_slice.batch_size(); ++i) {
      if (train_slice.row_complete(i)) complete.push_back(i);
    }
    if (complete.size() < 2) {
      throw std::runtime_error(
          "run_training: too few complete rows to train after dropping "
          "incomplete samples");
    }
    phase2_slice = train_slice.select_rows(complete);
  }

  Phase2Result phase2;
  if (traits.ensemble_eval) {
    bundle.ensemble.clear();
    for (std::size_t k = 0; k < cfg.ensemble_members; ++k) {
      Rng rng_member(seed_ensemble + 1736484976781ull * k);
      ClassifierHead member = ClassifierHead::init(head_config(cfg),
                                                   rng_member);
      Rng rng_p2(seed_phase2 + 909090909091ull * k);
      Phase2Result member_result = train_phase2(
          cfg, traits, bundle, member, phase2_slice, holdout, rng_p2);
      if (k == 0) {
        phase2 = std::move(member_result);
        bundle.head = member;
      }
      bundle.ensemble.push_back(std::move(member));
    }
  } else {
    Rng rng_p2(seed_phase2);
    phase2 = train_phase2(cfg, traits, bundle, bundle.head, phase2_slice,
                          holdout, rng_p2);
  }

  // Calibration statistics from the model's own training slice.
  Rng rng_eval(seed_eval);
  std::optional<CalibrationStats> calibration;
  if (traits.emit_uncertainty) {
    ScenarioRecords train_rec =
        evaluate_batch(cfg, traits, bundle, masked, nullptr, "train", {},
                       rng_eval);
    const auto& sigma2 = train_rec.sigma2_total.values();
    const auto& errors = train_rec.errors.values();
    CalibrationStats stats = calibration_stats(errors, sigma2);
    if (stats.sd_sigma > 0.0) calibration = stats;
  }

  RunArtifacts artifacts;
  artifacts.dir = out_dir;
  artifacts.config = cfg;
  artifacts.phase1 = std::move(phase1);
  artifacts.phase2_rows = phase2_slice.batch_size();
  artifacts.convergence = phase2.convergence;
  for (const auto& missing : default_scenarios(cfg.dataset.modalities)) {
    artifacts.scenarios.push_back(
        evaluate_scenario(cfg, traits, bundle, data.test, missing, rng_eval));
  }
  artifacts.summary = build_summary(cfg, artifacts.scenarios,
                                    artifacts.convergence, artifacts.phase1,
                                    calibration);

  std::filesystem::create_directories(out_dir);
  {
    nlohmann::ordered_json cfg_json;
    to_json(cfg_json, cfg);
    std::ofstream out(out_dir / "config.json");
    out << cfg_json.dump(2) << '\n';
  }
  write_manifest(out_dir, cfg);
  save_bundle(out_dir, bundle);
  write_convergence_csv(out_dir / "convergence.csv", artifacts.convergence);
  write_records_csv(out_dir / "records.csv", cfg, artifacts.scenarios);
  {
    std::ofstream out(out_dir / "summary.json");
    out << artifacts.summary.dump(2) << '\n';
  }
  artifacts.bundle = std::move(bundle);
  return artifacts;
}

// Rebuilds a trained bundle from a run directory; evaluation scenarios are
// reproducible from it without retraining.
inline std::pair<RunConfig, ModelBundle> load_bundle(
    const std::filesystem::path& run_dir) {
  std::ifstream in(run_dir / "config.json");
  if (!in) {
    throw std::runtime_error("load_bundle: missing config.json in " +
                             run_dir.string());
  }
  nlohmann::json cfg_json = nlohmann::json::parse(in);
  RunConfig cfg = cfg_json.get<RunConfig>();
  const MethodTraits traits = method_traits(cfg);
  Rng rng(0);
  ModelBundle bundle = init_bundle(cfg, rng);
  if (traits.ensemble_eval) {
    for (std::size_t k = 0; k < cfg.ensemble_members; ++k) {
      bundle.ensemble.push_back(ClassifierHead::init(head_config(cfg), rng));
    }
  }
  std::ifstream ckpt_in(run_dir / "model.ckpt.json");
  if (!ckpt_in) {
    throw std::runtime_error("load_bundle: missing model.ckpt.json in " +
                             run_dir.string());
  }
  nlohmann::json ckpt = nlohmann::json::parse(ckpt_in);
  std::vector<NamedParam> params = bundle_params(bundle);
  checkpoint_load(ckpt, params);
  if (traits.pretrain) bundle.backbone.freeze();
  if (traits.use_reconstruction) {
    for (Reconstructor& rec : bundle.reconstructors) rec.freeze();
  }
  return {std::move(cfg), std::move(bundle)};
}

}  // namespace sure
