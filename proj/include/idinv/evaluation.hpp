#pragma once

// Semantic probing of latent codes and image-set metrics (MSE, SWD, FFD).

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "idinv/core.hpp"
#include "idinv/dataset.hpp"
#include "idinv/perception.hpp"
#include "idinv/synthesis.hpp"

namespace idinv::evaluation {

struct SemanticBoundary {
  std::string attribute;
  Eigen::VectorXd normal;  // unit length
  double bias = 0.0;
};

/// [L, d] -> [d] by averaging rows.
Eigen::VectorXd code_vector(const LatentCode<float>& code);
RowMatrix<double> code_matrix(const std::vector<LatentCode<float>>& codes);

/// Soft-margin (C = 1) hinge-loss linear separator on row vectors; the
/// returned normal is unit length and score = normal . x + bias.
SemanticBoundary fit_boundary(const RowMatrix<double>& x, const std::vector<int>& labels, const std::string& attribute = "",
                              double c = 1.0);
SemanticBoundary fit_boundary(const std::vector<LatentCode<float>>& codes, const std::vector<int>& labels,
                              const std::string& attribute = "", double c = 1.0);

std::vector<double> classify_codes(const SemanticBoundary& b, const RowMatrix<double>& x);
std::vector<double> classify_codes(const SemanticBoundary& b, const std::vector<LatentCode<float>>& codes);

struct PRPoint {
  double precision = 0.0;
  double recall = 0.0;
  double threshold = 0.0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // thresholds descending, recall non-decreasing
  double auc = 0.0;
};

/// One point per distinct score, predicting positive when score >= threshold.
/// The area is the trapezoid rule over recall, starting from (recall 0,
/// precision of the first point).
PRCurve pr_curve(const std::vector<double>& scores, const std::vector<int>& labels);

double mse_metric(const std::vector<Image<float>>& a, const std::vector<Image<float>>& b);

struct SwdConfig {
  int patch = 7;
  int projections = 128;
  int stride = 1;
  std::uint64_t seed = 0;
};

/// All patch x patch windows (every channel) flattened to rows.
RowMatrix<double> extract_patches(const std::vector<Image<float>>& images, int patch, int stride = 1);

/// `count` unit-length rows of dimension `dim`.
RowMatrix<double> random_projections(int dim, int count, std::uint64_t seed);

/// Exact Wasserstein-1 distance between two empirical 1-D distributions.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);

/// Mean over projection rows of the 1-D distance between projected descriptor sets.
double sliced_wasserstein(const RowMatrix<double>& a, const RowMatrix<double>& b, const RowMatrix<double>& projections);

double swd(const std::vector<Image<float>>& a, const std::vector<Image<float>>& b, const SwdConfig& cfg = {});

/// ||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) on row samples.
double frechet_distance(const RowMatrix<double>& a, const RowMatrix<double>& b);

double ffd(const std::vector<Image<float>>& a, const std::vector<Image<float>>& b,
           const perception::FeatureExtractor<float>& f);

struct MetricReport {
  double mse = 0.0;
  double swd = 0.0;
  double ffd = 0.0;
  std::size_t count_a = 0;
  std::size_t count_b = 0;
  SwdConfig swd_config;
};

/// Paired sets: originals and their reconstructions.
MetricReport evaluate_reconstructions(const std::vector<Image<float>>& originals, const std::vector<Image<float>>& reconstructions,
                                      const perception::FeatureExtractor<float>& f, const SwdConfig& swd_cfg = {});

// ---------------------------------------------------------------------------
// Semantic probing

struct Inverter {
  std::string name;
  std::function<std::vector<LatentCode<float>>(const std::vector<Image<float>>&)> invert;
};

struct ProbeConfig {
  int boundary_samples = 2000;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  std::vector<SemanticBoundary> boundaries;
  std::vector<std::string> inverters;
  std::vector<std::vector<PRCurve>> curves;  // [inverter][attribute]
};

/// Boundaries fitted on generator samples labelled by the classifier head of `f`.
std::vector<SemanticBoundary> fit_generator_boundaries(const synthesis::GeneratorModel<float>& g,
                                                       const perception::FeatureExtractor<float>& f, const ProbeConfig& cfg);

/// Scores every inverter's codes for `data` against `boundaries` and the true labels.
ProbeResult semantic_probe_experiment(const std::vector<SemanticBoundary>& boundaries, const std::vector<Inverter>& inverters,
                                      const workspace::Dataset& data);

ProbeResult semantic_probe_experiment(const synthesis::GeneratorModel<float>& g, const perception::FeatureExtractor<float>& f,
                                      const std::vector<Inverter>& inverters, const workspace::Dataset& data,
                                      const ProbeConfig& cfg = {});

}  // namespace idinv::evaluation
