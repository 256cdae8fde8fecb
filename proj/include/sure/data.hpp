#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sure/losses.hpp"
#include "sure/random.hpp"
#include "sure/tensor.hpp"

namespace sure {

struct DatasetConfig {
  std::size_t modalities = 2;              // M
  std::vector<std::size_t> modality_dims;  // n_i
  std::size_t latent_factors = 6;          // p, shared across modalities
  std::vector<double> noise_scales;        // s_i
  Task task = Task::regression;
  std::size_t classes = 2;                 // k, classification only
  std::size_t n_pretrain = 1000;
  std::size_t n_finetune = 200;
  std::size_t n_test = 500;
  std::uint64_t seed = 0;

  std::size_t label_dim() const {
    return task == Task::classification ? classes : 1;
  }

  void validate() const {
    if (modalities < 2) {
      throw std::invalid_argument("DatasetConfig: need at least 2 modalities");
    }
    if (modality_dims.size() != modalities ||
        noise_scales.size() != modalities) {
      throw std::invalid_argument(
          "DatasetConfig: modality_dims/noise_scales must have one entry per "
          "modality");
    }
    for (std::size_t d : modality_dims) {
      if (d == 0) throw std::invalid_argument("DatasetConfig: zero dim");
    }
    for (double s : noise_scales) {
      if (s < 0.0) {
        throw std::invalid_argument("DatasetConfig: negative noise scale");
      }
    }
    if (latent_factors == 0) {
      throw std::invalid_argument("DatasetConfig: zero latent factors");
    }
    if (task == Task::classification && classes < 2) {
      throw std::invalid_argument("DatasetConfig: need at least 2 classes");
    }
    if (n_pretrain == 0 || n_finetune == 0 || n_test == 0) {
      throw std::invalid_argument("DatasetConfig: empty split");
    }
  }
};

template <typename BasicJson>
void to_json(BasicJson& j, const DatasetConfig& c) {
  j["modalities"] = c.modalities;
  j["modality_dims"] = c.modality_dims;
  j["latent_factors"] = c.latent_factors;
  j["noise_scales"] = c.noise_scales;
  j["task"] =
      c.task == Task::classification ? "classification" : "regression";
  j["classes"] = c.classes;
  j["n_pretrain"] = c.n_pretrain;
  j["n_finetune"] = c.n_finetune;
  j["n_test"] = c.n_test;
  j["seed"] = c.seed;
}

template <typename BasicJson>
void from_json(const BasicJson& j, DatasetConfig& c) {
  j.at("modalities").get_to(c.modalities);
  j.at("modality_dims").get_to(c.modality_dims);
  j.at("latent_factors").get_to(c.latent_factors);
  j.at("noise_scales").get_to(c.noise_scales);
  const std::string task = j.at("task").template get<std::string>();
  if (task == "classification") {
    c.task = Task::classification;
  } else if (task == "regression") {
    c.task = Task::regression;
  } else {
    throw std::invalid_argument("DatasetConfig: unknown task " + task);
  }
  if (j.contains("classes")) j.at("classes").get_to(c.classes);
  j.at("n_pretrain").get_to(c.n_pretrain);
  j.at("n_finetune").get_to(c.n_finetune);
  j.at("n_test").get_to(c.n_test);
  j.at("seed").get_to(c.seed);
}

// One batch of multimodal data. Absent entries of x[i] are zero-filled
// placeholders that compliant code never reads.
struct ModalBatch {
  std::vector<Tensor> x;               // per modality, (batch, n_i)
  std::vector<std::uint8_t> present;   // batch * M, row-major
  Tensor labels;                       // (batch, k) one-hot or (batch, 1)

  std::size_t batch_size() const { return x.empty() ? 0 : x[0].rows(); }
  std::size_t modality_count() const { return x.size(); }

  bool is_present(std::size_t row, std::size_t m) const {
    return present[row * modality_count() + m] != 0;
  }
  void set_present(std::size_t row, std::size_t m, bool value) {
    present[row * modality_count() + m] = value ? 1 : 0;
  }

  std::size_t present_count(std::size_t row) const {
    std::size_t count = 0;
    for (std::size_t m = 0; m < modality_count(); ++m) {
      if (is_present(row, m)) ++count;
    }
    return count;
  }

  bool row_complete(std::size_t row) const {
    return present_count(row) == modality_count();
  }

  ModalBatch select_rows(const std::vector<std::size_t>& rows) const {
    ModalBatch out;
    out.x.reserve(x.size());
    for (const Tensor& xm : x) {
      Tensor sub(rows.size(), xm.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < xm.cols(); ++j) {
          sub(i, j) = xm(rows[i], j);
        }
      }
      out.x.push_back(std::move(sub));
    }
    out.present.resize(rows.size() * modality_count());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t m = 0; m < modality_count(); ++m) {
        out.present[i * modality_count() + m] =
            present[rows[i] * modality_count() + m];
      }
    }
    out.labels = Tensor(rows.size(), labels.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      for (std::size_t j = 0; j < labels.cols(); ++j) {
        out.labels(i, j) = labels(rows[i], j);
      }
    }
    return out;
  }
};

struct DatasetSplits {
  ModalBatch pretrain;
  ModalBatch finetune;
  ModalBatch test;
};

namespace detail {

inline ModalBatch draw_batch(const DatasetConfig& cfg, std::size_t n,
                             const std::vector<Tensor>& mixing,
                             const Tensor& label_map, Rng& rng) {
  ModalBatch batch;
  for (std::size_t m = 0; m < cfg.modalities; ++m) {
    batch.x.emplace_back(n, cfg.modality_dims[m]);
  }
  batch.present.assign(n * cfg.modalities, 1);
  batch.labels = Tensor(n, cfg.label_dim());

  std::vector<double> u(cfg.latent_factors);
  for (std::size_t i = 0; i < n; ++i) {
    for (double& v : u) v = rng.normal();
    for (std::size_t m = 0; m < cfg.modalities; ++m) {
      const Tensor& a = mixing[m];
      Tensor& xm = batch.x[m];
      for (std::size_t j = 0; j < cfg.modality_dims[m]; ++j) {
        double v = 0.0;
        for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
          v += a(j, p) * u[p];
        }
        xm(i, j) = v + cfg.noise_scales[m] * rng.normal();
      }
    }
    if (cfg.task == Task::regression) {
      double y = 0.0;
      for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
        y += label_map(0, p) * u[p];
      }
      batch.labels(i, 0) = y + 0.05 * rng.normal();
    } else {
      std::size_t best = 0;
      double best_score = -1e300;
      for (std::size_t kcls = 0; kcls < cfg.classes; ++kcls) {
        double score = 0.0;
        for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
          score += label_map(kcls, p) * u[p];
        }
        if (score > best_score) {
          best_score = score;
          best = kcls;
        }
      }
      batch.labels(i, best) = 1.0;
    }
  }
  return batch;
}

}  // namespace detail

// Draws (pretrain, finetune, test) splits from a shared latent-factor model:
// u ~ N(0, I_p), x^i = A_i u + s_i eta_i, labels from a fixed linear map of u.
// The shared u is what makes cross-modal reconstruction learnable.
inline DatasetSplits generate(const DatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<Tensor> mixing;
  const double col_scale =
      1.0 / std::sqrt(static_cast<double>(cfg.latent_factors));
  for (std::size_t m = 0; m < cfg.modalities; ++m) {
    Tensor a(cfg.modality_dims[m], cfg.latent_factors);
    for (double& v : a.values()) v = rng.normal() * col_scale;
    mixing.push_back(std::move(a));
  }
  Tensor label_map(cfg.task == Task::classification ? cfg.classes : 1,
                   cfg.latent_factors);
  for (double& v : label_map.values()) {
    v = rng.normal() * (cfg.task == Task::classification ? 1.0 : col_scale);
  }
  if (cfg.task == Task::classification) {
    // Orthonormalize the class directions (Gram-Schmidt). With an
    // orthonormal frame the class scores are i.i.d. standard normal, so the
    // argmax labels are uniformly distributed over the classes.
    for (std::size_t kcls = 0; kcls < cfg.classes; ++kcls) {
      for (std::size_t prev = 0; prev < kcls && prev < cfg.latent_factors;
           ++prev) {
        double dot = 0.0;
        for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
          dot += label_map(kcls, p) * label_map(prev, p);
        }
        for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
          label_map(kcls, p) -= dot * label_map(prev, p);
        }
      }
      double norm = 0.0;
      for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
        norm += label_map(kcls, p) * label_map(kcls, p);
      }
      norm = std::sqrt(norm);
      for (std::size_t p = 0; p < cfg.latent_factors; ++p) {
        label_map(kcls, p) /= norm;
      }
    }
  }

  DatasetSplits splits;
  splits.pretrain = detail::draw_batch(cfg, cfg.n_pretrain, mixing,
                                       label_map, rng);
  splits.finetune = detail::draw_batch(cfg, cfg.n_finetune, mixing,
                                       label_map, rng);
  splits.test = detail::draw_batch(cfg, cfg.n_test, mixing, label_map, rng);
  return splits;
}

// Marks round(fraction * batch) samples absent per modality, with independent
// draws across modalities. Rows left with no present modality are repaired by
// re-assigning the absence to a donor row, which keeps the per-modality
// absence counts exact. Absent entries are zero-filled.
inline ModalBatch apply_masks(const ModalBatch& batch, double missing_fraction,
                              std::uint64_t seed) {
  if (missing_fraction < 0.0 || missing_fraction >= 1.0) {
    throw std::invalid_argument("apply_masks: fraction must be in [0, 1)");
  }
  ModalBatch out = batch;
  const std::size_t n = batch.batch_size();
  const std::size_t m_count = batch.modality_count();
  const std::size_t absences = static_cast<std::size_t>(
      std::llround(missing_fraction * static_cast<double>(n)));
  Rng rng(seed);

  std::vector<std::size_t> order(n);
  for (std::size_t m = 0; m < m_count; ++m) {
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < absences; ++i) {
      out.set_present(order[i], m, false);
    }
  }

  // Repair: move one absence from the offending row to a donor that can
  // spare a modality. Each step fixes one row and creates no new offenders.
  for (std::size_t row = 0; row < n; ++row) {
    if (out.present_count(row) > 0) continue;
    std::vector<std::size_t> mods(m_count);
    for (std::size_t m = 0; m < m_count; ++m) mods[m] = m;
    rng.shuffle(mods);
    bool repaired = false;
    for (std::size_t m : mods) {
      std::vector<std::size_t> donors;
      for (std::size_t r = 0; r < n; ++r) {
        if (r != row && out.is_present(r, m) && out.present_count(r) >= 2) {
          donors.push_back(r);
        }
      }
      if (donors.empty()) continue;
      const std::size_t donor = donors[rng.below(donors.size())];
      out.set_present(row, m, true);
      out.set_present(donor, m, false);
      repaired = true;
      break;
    }
    if (!repaired) {
      // No donor anywhere (only possible at extreme fractions); force one
      // modality back at the cost of one extra presence.
      out.set_present(row, mods[0], true);
    }
  }

  for (std::size_t m = 0; m < m_count; ++m) {
    for (std::size_t i = 0; i < n; ++i) {
      if (!out.is_present(i, m)) {
        for (std::size_t j = 0; j < out.x[m].cols(); ++j) {
          out.x[m](i, j) = 0.0;
        }
      } else {
        for (std::size_t j = 0; j < out.x[m].cols(); ++j) {
          out.x[m](i, j) = batch.x[m](i, j);
        }
      }
    }
  }
  return out;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_matrix_csv(const std::filesystem::path& path,
                             const Tensor& t) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  }
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      if (j) out << ',';
      out << format_double(t(i, j));
    }
    out << '\n';
  }
}

inline Tensor read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      row.push_back(std::stod(cell));
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) {
    throw std::runtime_error("empty csv " + path.string());
  }
  Tensor t(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != t.cols()) {
      throw std::runtime_error("ragged csv " + path.string());
    }
    for (std::size_t j = 0; j < t.cols(); ++j) t(i, j) = rows[i][j];
  }
  return t;
}

inline void write_split(const std::filesystem::path& dir,
                        const std::string& name, const ModalBatch& batch) {
  for (std::size_t m = 0; m < batch.modality_count(); ++m) {
    write_matrix_csv(dir / (name + "_modality" + std::to_string(m) + ".csv"),
                     batch.x[m]);
  }
  Tensor mask(batch.batch_size(), batch.modality_count());
  for (std::size_t i = 0; i < batch.batch_size(); ++i) {
    for (std::size_t m = 0; m < batch.modality_count(); ++m) {
      mask(i, m) = batch.is_present(i, m) ? 1.0 : 0.0;
    }
  }
  write_matrix_csv(dir / (name + "_mask.csv"), mask);
  write_matrix_csv(dir / (name + "_labels.csv"), batch.labels);
}

inline ModalBatch read_split(const std::filesystem::path& dir,
                             const std::string& name, std::size_t modalities) {
  ModalBatch batch;
  for (std::size_t m = 0; m < modalities; ++m) {
    batch.x.push_back(read_matrix_csv(
        dir / (name + "_modality" + std::to_string(m) + ".csv")));
  }
  Tensor mask = read_matrix_csv(dir / (name + "_mask.csv"));
  batch.present.resize(mask.rows() * mask.cols());
  for (std::size_t i = 0; i < mask.size(); ++i) {
    batch.present[i] = mask.values()[i] != 0.0 ? 1 : 0;
  }
  batch.labels = read_matrix_csv(dir / (name + "_labels.csv"));
  return batch;
}

}  // namespace detail

inline void write_dataset(const std::filesystem::path& dir,
                          const DatasetConfig& cfg,
                          const DatasetSplits& splits) {
  std::filesystem::create_directories(dir);
  detail::write_split(dir, "pretrain", splits.pretrain);
  detail::write_split(dir, "finetune", splits.finetune);
  detail::write_split(dir, "test", splits.test);
  nlohmann::ordered_json manifest;
  manifest["config"] = cfg;
  manifest["seed"] = cfg.seed;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

inline std::pair<DatasetConfig, DatasetSplits> read_dataset(
    const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    throw std::runtime_error("missing manifest.json in " + dir.string());
  }
  nlohmann::json manifest = nlohmann::json::parse(in);
  DatasetConfig cfg = manifest.at("config").get<DatasetConfig>();
  DatasetSplits splits;
  splits.pretrain = detail::read_split(dir, "pretrain", cfg.modalities);
  splits.finetune = detail::read_split(dir, "finetune", cfg.modalities);
  splits.test = detail::read_split(dir, "test", cfg.modalities);
  return {cfg, splits};
}

}  // namespace sure
