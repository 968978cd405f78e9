#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "icwm/training.hpp"

namespace icwm::probes {

using ad::Mat;

/// Per-point silhouette coefficients under the Euclidean metric. A point
/// alone in its class scores 0, as does a point with a = b = 0.
std::vector<double> silhouette_samples(const Mat& points, std::span<const std::size_t> labels);
/// Mean of silhouette_samples. Needs at least two classes.
double silhouette_score(const Mat& points, std::span<const std::size_t> labels);

/// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

/// Percentile bootstrap interval of the Spearman correlation over resampled
/// pairs.
Interval bootstrap_spearman(std::span<const double> x, std::span<const double> y, std::size_t n_boot,
                            double level, std::uint64_t seed);

struct PcProbeConfig {
  std::vector<std::size_t> positions{10, 50, 150};
  std::vector<std::size_t> ks{1, 8};
  /// When set, the substituted latent is the true one plus Gaussian noise of
  /// this scale instead of the model's own prediction.
  std::optional<double> noise_scale;
  std::uint64_t seed = 0;
  std::size_t n_boot = 1000;
};

struct PcSample {
  std::size_t traj = 0;
  std::size_t env = 0;
  std::size_t position = 0;
  std::size_t k = 0;
  double substituted_error = 0.0;
  double delta = 0.0;
};

struct PcSummary {
  std::size_t k = 0;
  std::size_t n = 0;
  double mean_delta = 0.0;
  double spearman = 0.0;
  Interval ci;
};

struct PcReport {
  std::vector<PcSample> samples;
  std::vector<PcSummary> summary;  // one per k
};

/// At each position p the input latent s_p is replaced and the error of the
/// prediction of o_{p+k} is compared against the unsubstituted run.
PcReport predictive_coding_probe(seqmodel::GsaModel& model, const cartpole::Dataset& ds,
                                 const seqmodel::Normalizer& norm, const PcProbeConfig& cfg);

struct SilhouetteRow {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::size_t n_points = 0;
  double score = 0.0;
};

/// Silhouette of memory states at `step`, with environments as classes.
std::vector<SilhouetteRow> silhouette_probe(std::span<const seqmodel::MemoryDump> dumps, std::size_t step);

}  // namespace icwm::probes
