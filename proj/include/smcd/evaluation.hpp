#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "smcd/encoders.hpp"
#include "smcd/trajectory.hpp"

namespace smcd {

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

// ---- oracle tracker ---------------------------------------------------------

struct TrackTarget {
  std::string label;
  std::array<std::uint8_t, 3> rgb;
};

struct TrackerOptions {
  double tolerance = 0.3;  // Euclidean RGB distance, channels in [0, 1]
};

/// Color segmentation: a pixel belongs to the nearest target color within
/// tolerance; each object's box is the tight extent of its pixels.
inline std::vector<ObjectTrajectory> oracle_track(const std::vector<Image>& frames, const std::vector<TrackTarget>& targets,
                                                  const TrackerOptions& opt = {}) {
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = i + 1; j < targets.size(); ++j)
      SMCD_REQUIRE(targets[i].rgb != targets[j].rgb, ConfigError,
                   "oracle_track: objects '" + targets[i].label + "' and '" + targets[j].label + "' share a color");
  const double tol2 = opt.tolerance * opt.tolerance;
  std::vector<ObjectTrajectory> out;
  for (const auto& t : targets) out.push_back({t.label, {}});
  for (const Image& img : frames) {
    std::vector<std::array<int, 4>> ext(targets.size(), {img.width, img.height, -1, -1});
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        int best = -1;
        double best_d = tol2;
        for (std::size_t k = 0; k < targets.size(); ++k) {
          double d = 0;
          for (int c = 0; c < 3; ++c) {
            const double diff = (img.at(y, x, c) - targets[k].rgb[c]) / 255.0;
            d += diff * diff;
          }
          if (d <= best_d) best_d = d, best = static_cast<int>(k);
        }
        if (best < 0) continue;
        auto& e = ext[static_cast<std::size_t>(best)];
        e = {std::min(e[0], x), std::min(e[1], y), std::max(e[2], x), std::max(e[3], y)};
      }
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto& e = ext[k];
      if (e[2] < 0) {
        out[k].boxes.emplace_back(std::nullopt);
      } else {
        const double w = img.width, h = img.height;
        out[k].boxes.emplace_back(BoundingBox{e[0] / w, e[1] / h, (e[2] + 1) / w, (e[3] + 1) / h});
      }
    }
  }
  return out;
}

// ---- grounding accuracy -----------------------------------------------------

struct GroundingReport {
  std::vector<std::vector<std::optional<double>>> iou;  // [object][frame]; nullopt = both absent
  double ao = 0, sr50 = 0, sr75 = 0;
  int scored = 0;
};

/// Per (object, frame): IoU when both are present, 0 when only one is,
/// excluded when neither is. AO is the mean score, SR_tau the fraction of
/// scores above tau. An empty prediction counts as "absent everywhere".
inline GroundingReport grounding_metrics(const std::vector<ObjectTrajectory>& pred, const std::vector<ObjectTrajectory>& gt) {
  SMCD_REQUIRE(pred.empty() || pred.size() == gt.size(), ContractViolation,
               "grounding_metrics: " + std::to_string(pred.size()) + " predicted objects vs " +
                   std::to_string(gt.size()) + " ground-truth objects");
  GroundingReport r;
  int hit50 = 0, hit75 = 0;
  double sum = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int frames = gt[i].frames();
    if (!pred.empty())
      SMCD_REQUIRE(pred[i].frames() == frames, ContractViolation,
                   "grounding_metrics: object " + std::to_string(i) + " has " + std::to_string(pred[i].frames()) +
                       " predicted frames vs " + std::to_string(frames));
    auto& row = r.iou.emplace_back();
    for (int f = 0; f < frames; ++f) {
      const auto& g = gt[i].boxes[static_cast<std::size_t>(f)];
      const std::optional<BoundingBox> p = pred.empty() ? std::nullopt : pred[i].boxes[static_cast<std::size_t>(f)];
      if (!g && !p) {
        row.emplace_back(std::nullopt);
        continue;
      }
      const double v = g && p ? iou(*g, *p) : 0.0;
      row.emplace_back(v);
      sum += v;
      hit50 += v > 0.5;
      hit75 += v > 0.75;
      ++r.scored;
    }
  }
  if (r.scored > 0) {
    r.ao = sum / r.scored;
    r.sr50 = static_cast<double>(hit50) / r.scored;
    r.sr75 = static_cast<double>(hit75) / r.scored;
  }
  return r;
}

// ---- features ----------------------------------------------------------------

/// Plugin boundary: any deterministic image -> vector map plus its name.
struct FeatureExtractor {
  std::string id;
  std::function<std::vector<double>(const Image&)> fn;
};

/// Rec. 601 luminance, area-averaged onto an 8x8 grid, flattened.
inline FeatureExtractor luminance_extractor(int grid = 8) {
  return {"luma" + std::to_string(grid) + "x" + std::to_string(grid), [grid](const Image& img) {
            std::vector<double> sum(static_cast<std::size_t>(grid * grid), 0.0), count(sum.size(), 0.0);
            for (int y = 0; y < img.height; ++y)
              for (int x = 0; x < img.width; ++x) {
                const std::size_t cell = static_cast<std::size_t>(y * grid / img.height * grid + x * grid / img.width);
                sum[cell] += 0.299 * img.value(y, x, 0) + 0.587 * img.value(y, x, 1) + 0.114 * img.value(y, x, 2);
                count[cell] += 1;
              }
            for (std::size_t i = 0; i < sum.size(); ++i) sum[i] = count[i] > 0 ? sum[i] / count[i] : 0.0;
            return sum;
          }};
}

inline std::optional<double> cosine(const std::vector<double>& a, const std::vector<double>& b) {
  SMCD_REQUIRE(a.size() == b.size(), ContractViolation, "cosine: feature lengths differ");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  if (aa == 0.0 || bb == 0.0) return std::nullopt;
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

struct FidelityResult {
  double value = 0;  // mean cosine over the frames that could be scored
  int excluded = 0;  // frames dropped for a zero-norm feature
};

/// Mean cosine similarity between features of the conditioning frame and of
/// each video frame. Zero-norm features are skipped and counted.
inline FidelityResult first_frame_fidelity_features(const std::vector<double>& cond,
                                                    const std::vector<std::vector<double>>& frames) {
  FidelityResult r;
  double sum = 0;
  int n = 0;
  for (const auto& f : frames) {
    const auto c = cosine(cond, f);
    if (!c) {
      ++r.excluded;
      continue;
    }
    sum += *c;
    ++n;
  }
  r.value = n ? sum / n : 0.0;
  return r;
}

inline FidelityResult first_frame_fidelity(const Image& cond_frame, const std::vector<Image>& frames,
                                           const FeatureExtractor& fx = luminance_extractor()) {
  std::vector<std::vector<double>> feats;
  for (const auto& f : frames) feats.push_back(fx.fn(f));
  return first_frame_fidelity_features(fx.fn(cond_frame), feats);
}

// ---- Frechet distance --------------------------------------------------------

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) with unbiased
/// covariances. The cross term uses tr((A^{1/2} B A^{1/2})^{1/2}), which
/// equals tr((AB)^{1/2}) for PSD A and B but stays symmetric.
inline double frechet_distance(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  SMCD_REQUIRE(a.size() >= 2 && b.size() >= 2, ContractViolation, "frechet_distance: need at least 2 vectors per set");
  const std::size_t d = a[0].size();
  for (const auto* set : {&a, &b})
    for (const auto& v : *set) SMCD_REQUIRE(v.size() == d, ContractViolation, "frechet_distance: dimension mismatch");
  auto stats = [d](const std::vector<std::vector<double>>& s) {
    Eigen::MatrixXd x(static_cast<Eigen::Index>(s.size()), static_cast<Eigen::Index>(d));
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = s[i][j];
    const Eigen::RowVectorXd mu = x.colwise().mean();
    const Eigen::MatrixXd c = x.rowwise() - mu;
    return std::pair<Eigen::RowVectorXd, Eigen::MatrixXd>{mu, c.transpose() * c / static_cast<double>(s.size() - 1)};
  };
  const auto [mu_a, cov_a] = stats(a);
  const auto [mu_b, cov_b] = stats(b);
  const Eigen::MatrixXd sa = detail::psd_sqrt(cov_a);
  const Eigen::MatrixXd cross = sa * cov_b * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (cross + cross.transpose()), Eigen::EigenvaluesOnly);
  const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  const double dist = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, dist);
}

// ---- reports -----------------------------------------------------------------

struct ObjectScore {
  std::string video;
  std::string label;
  double ao = 0, sr50 = 0, sr75 = 0;
  int scored = 0;
};

struct EvalReport {
  double ao = 0, sr50 = 0, sr75 = 0;  // mean over videos
  double fff = 0;                     // mean over videos
  std::optional<double> frechet;      // generated vs reference frame features
  int videos = 0;
  int fff_excluded = 0;
  std::string extractor;
  std::string tracker;
  std::vector<ObjectScore> per_object;
};

inline void to_json(nlohmann::json& j, const EvalReport& r) {
  nlohmann::json objs = nlohmann::json::array();
  for (const auto& o : r.per_object)
    objs.push_back({{"video", o.video}, {"label", o.label}, {"AO", o.ao}, {"SR_50", o.sr50}, {"SR_75", o.sr75},
                    {"scored_frames", o.scored}});
  j = {{"AO", r.ao},
       {"SR_50", r.sr50},
       {"SR_75", r.sr75},
       {"FFF", r.fff},
       {"FFF_excluded_frames", r.fff_excluded},
       {"frechet", r.frechet ? nlohmann::json(*r.frechet) : nlohmann::json(nullptr)},
       {"videos", r.videos},
       {"extractor", r.extractor},
       {"tracker", r.tracker},
       {"per_object", objs}};
}

/// Plain-text summary laid out like a results table.
inline std::string report_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "| Method | FVD* | FFF (" << r.extractor << ") | AO | SR_50 | SR_75 |\n";
  os << "|---|---|---|---|---|---|\n";
  os << "| SMCD | ";
  if (r.frechet) os << *r.frechet;
  else os << "-";
  os << " | " << r.fff << " | " << r.ao << " | " << r.sr50 << " | " << r.sr75 << " |\n";
  os << "\n* Frechet distance of " << r.extractor << " frame features (stand-in for FVD); tracker: " << r.tracker
     << "; videos: " << r.videos << "\n";
  return os.str();
}

}  // namespace smcd
