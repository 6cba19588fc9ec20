#include "idinv/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "idinv/training.hpp"

namespace idinv::evaluation {

Eigen::VectorXd code_vector(const LatentCode<float>& code) {
  IDINV_REQUIRE(code.layers() >= 1, "empty code");
  return code.values.cast<double>().colwise().mean().transpose();
}

RowMatrix<double> code_matrix(const std::vector<LatentCode<float>>& codes) {
  IDINV_REQUIRE(!codes.empty(), "no codes");
  RowMatrix<double> x(static_cast<Eigen::Index>(codes.size()), codes.front().width());
  for (std::size_t i = 0; i < codes.size(); ++i) {
    IDINV_REQUIRE(codes[i].width() == codes.front().width(), "codes have different widths");
    x.row(static_cast<Eigen::Index>(i)) = code_vector(codes[i]).transpose();
  }
  return x;
}

SemanticBoundary fit_boundary(const RowMatrix<double>& x, const std::vector<int>& labels, const std::string& attribute, double c) {
  const Eigen::Index n = x.rows(), d = x.cols();
  IDINV_REQUIRE(n == static_cast<Eigen::Index>(labels.size()), "code and label counts differ");
  IDINV_REQUIRE(c > 0, "regularization must be positive");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  IDINV_REQUIRE(positives > 0 && positives < n, "boundary fitting needs both classes");

  // Dual coordinate descent on the hinge loss; the constant feature carries the bias.
  const Eigen::RowVectorXd mean = x.colwise().mean();
  Eigen::MatrixXd xa(n, d + 1);
  xa.leftCols(d) = x.rowwise() - mean;
  xa.col(d).setOnes();
  Eigen::VectorXd y(n), alpha = Eigen::VectorXd::Zero(n), w = Eigen::VectorXd::Zero(d + 1);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = labels[static_cast<std::size_t>(i)] == 1 ? 1.0 : -1.0;
  const Eigen::VectorXd qii = xa.rowwise().squaredNorm();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  SeededRng rng(0);
  for (int epoch = 0; epoch < 2000; ++epoch) {
    rng.shuffle(order);
    double max_pg = -1e300, min_pg = 1e300;
    for (auto i : order) {
      const double g = y(i) * xa.row(i).dot(w) - 1.0;
      double pg = g;
      if (alpha(i) <= 0.0) pg = std::min(g, 0.0);
      else if (alpha(i) >= c) pg = std::max(g, 0.0);
      max_pg = std::max(max_pg, pg);
      min_pg = std::min(min_pg, pg);
      if (std::abs(pg) > 1e-14) {
        const double old = alpha(i);
        alpha(i) = std::clamp(old - g / qii(i), 0.0, c);
        w += (alpha(i) - old) * y(i) * xa.row(i).transpose();
      }
    }
    if (max_pg - min_pg < 1e-8) break;
  }
  const Eigen::VectorXd normal = w.head(d);
  const double norm = normal.norm();
  if (!(norm > 0) || !std::isfinite(norm)) throw Error(ErrorKind::kMetricFailure, "degenerate boundary for " + attribute);
  SemanticBoundary b;
  b.attribute = attribute;
  b.normal = normal / norm;
  b.bias = (w(d) - normal.dot(mean.transpose())) / norm;
  return b;
}

SemanticBoundary fit_boundary(const std::vector<LatentCode<float>>& codes, const std::vector<int>& labels,
                              const std::string& attribute, double c) {
  return fit_boundary(code_matrix(codes), labels, attribute, c);
}

std::vector<double> classify_codes(const SemanticBoundary& b, const RowMatrix<double>& x) {
  IDINV_REQUIRE(x.cols() == b.normal.size(), "code width " + std::to_string(x.cols()) + " does not match boundary width " +
                                                 std::to_string(b.normal.size()));
  const Eigen::VectorXd s = (x * b.normal).array() + b.bias;
  return {s.data(), s.data() + s.size()};
}

std::vector<double> classify_codes(const SemanticBoundary& b, const std::vector<LatentCode<float>>& codes) {
  return classify_codes(b, code_matrix(codes));
}

PRCurve pr_curve(const std::vector<double>& scores, const std::vector<int>& labels) {
  IDINV_REQUIRE(scores.size() == labels.size(), "score and label counts differ");
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  IDINV_REQUIRE(positives > 0, "pr_curve needs at least one positive label");
  for (double s : scores) IDINV_REQUIRE(std::isfinite(s), "scores must be finite");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  PRCurve curve;
  long tp = 0, taken = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += labels[order[k]] == 1 ? 1 : 0;
    ++taken;
    if (k + 1 < order.size() && scores[order[k + 1]] == scores[order[k]]) continue;
    curve.points.push_back({static_cast<double>(tp) / static_cast<double>(taken),
                            static_cast<double>(tp) / static_cast<double>(positives), scores[order[k]]});
  }
  double prev_r = 0.0, prev_p = curve.points.front().precision;
  for (const auto& p : curve.points) {
    curve.auc += (p.recall - prev_r) * 0.5 * (p.precision + prev_p);
    prev_r = p.recall;
    prev_p = p.precision;
  }
  return curve;
}

double mse_metric(const std::vector<Image<float>>& a, const std::vector<Image<float>>& b) {
  IDINV_REQUIRE(a.size() == b.size(), "mse_metric needs paired sets of equal length");
  IDINV_REQUIRE(!a.empty(), "mse_metric on empty sets");
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) total += static_cast<double>(mse(a[i], b[i]));
  return total / static_cast<double>(a.size());
}

RowMatrix<double> extract_patches(const std::vector<Image<float>>& images, int patch, int stride) {
  IDINV_REQUIRE(!images.empty(), "no images to extract patches from");
  IDINV_REQUIRE(patch >= 1 && stride >= 1, "patch size and stride must be positive");
  const auto& first = images.front();
  IDINV_REQUIRE(patch <= first.height && patch <= first.width, "patch larger than the image");
  const int ny = (first.height - patch) / stride + 1, nx = (first.width - patch) / stride + 1;
  const int dim = first.channels * patch * patch;
  RowMatrix<double> out(static_cast<Eigen::Index>(images.size()) * ny * nx, dim);
  Eigen::Index row = 0;
  for (const auto& img : images) {
    IDINV_REQUIRE(img.same_shape(first), "images have different shapes");
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x, ++row) {
        int k = 0;
        for (int c = 0; c < img.channels; ++c)
          for (int dy = 0; dy < patch; ++dy)
            for (int dx = 0; dx < patch; ++dx) out(row, k++) = img.at(c, y * stride + dy, x * stride + dx);
      }
  }
  return out;
}

RowMatrix<double> random_projections(int dim, int count, std::uint64_t seed) {
  IDINV_REQUIRE(dim >= 1 && count >= 1, "projection dimension and count must be positive");
  SeededRng rng(seed);
  RowMatrix<double> p(count, dim);
  for (int i = 0; i < count; ++i) {
    double n = 0.0;
    do {
      for (int j = 0; j < dim; ++j) p(i, j) = rng.normal();
      n = p.row(i).norm();
    } while (!(n > 0));
    p.row(i) /= n;
  }
  return p;
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  IDINV_REQUIRE(!a.empty() && !b.empty(), "Wasserstein distance of an empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  if (a.size() == b.size()) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
    return s / static_cast<double>(a.size());
  }
  // Integrate |Qa(u) - Qb(u)| over the merged quantile breakpoints.
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  std::size_t i = 0, j = 0;
  double u = 0.0, s = 0.0;
  while (i < a.size() && j < b.size()) {
    const double next = std::min((i + 1) / na, (j + 1) / nb);
    s += (next - u) * std::abs(a[i] - b[j]);
    u = next;
    if ((i + 1) / na <= next) ++i;
    if ((j + 1) / nb <= next) ++j;
  }
  return s;
}

double sliced_wasserstein(const RowMatrix<double>& a, const RowMatrix<double>& b, const RowMatrix<double>& projections) {
  IDINV_REQUIRE(a.rows() > 0 && b.rows() > 0, "sliced Wasserstein of an empty set");
  IDINV_REQUIRE(a.cols() == b.cols() && a.cols() == projections.cols(), "descriptor and projection dimensions differ");
  const Eigen::MatrixXd pa = a * projections.transpose(), pb = b * projections.transpose();
  double total = 0.0;
  for (Eigen::Index k = 0; k < projections.rows(); ++k) {
    std::vector<double> xa(pa.col(k).data(), pa.col(k).data() + pa.rows());
    std::vector<double> xb(pb.col(k).data(), pb.col(k).data() + pb.rows());
    total += wasserstein_1d(std::move(xa), std::move(xb));
  }
  return total / static_cast<double>(projections.rows());
}

double swd(const std::vector<Image<float>>& a, const std::vector<Image<float>>& b, const SwdConfig& cfg) {
  IDINV_REQUIRE(!a.empty() && !b.empty(), "swd needs two non-empty sets");
  IDINV_REQUIRE(cfg.projections >= 1, "swd needs at least one projection");
  const auto pa = extract_patches(a, cfg.patch, cfg.stride), pb = extract_patches(b, cfg.patch, cfg.stride);
  return sliced_wasserstein(pa, pb, random_projections(static_cast<int>(pa.cols()), cfg.projections, cfg.seed));
}

namespace {

Eigen::MatrixXd covariance(const RowMatrix<double>& x, const Eigen::RowVectorXd& mean) {
  const Eigen::MatrixXd centered = x.rowwise() - mean;
  return centered.transpose() * centered / static_cast<double>(x.rows() - 1);
}

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  if (es.info() != Eigen::Success) throw Error(ErrorKind::kMetricFailure, std::string("eigendecomposition failed for ") + what);
  Eigen::VectorXd ev = es.eigenvalues();
  const double scale = std::max(1.0, ev.cwiseAbs().maxCoeff());
  if (ev.minCoeff() < -1e-6 * scale) {
    std::ostringstream msg;
    msg << what << " is not positive semi-definite (eigenvalues in [" << ev.minCoeff() << ", " << ev.maxCoeff() << "])";
    throw Error(ErrorKind::kMetricFailure, msg.str());
  }
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const RowMatrix<double>& a, const RowMatrix<double>& b) {
  IDINV_REQUIRE(a.cols() == b.cols(), "feature dimensions differ");
  IDINV_REQUIRE(a.rows() >= 2 && b.rows() >= 2, "Frechet distance needs at least two samples per set");
  const Eigen::RowVectorXd ma = a.colwise().mean(), mb = b.colwise().mean();
  const Eigen::MatrixXd sa = covariance(a, ma), sb = covariance(b, mb);
  // tr((Sa Sb)^(1/2)) = tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)), which stays symmetric.
  const Eigen::MatrixXd ra = psd_sqrt(sa, "first covariance");
  const Eigen::MatrixXd inner = ra * sb * ra;
  const Eigen::MatrixXd cross = psd_sqrt(0.5 * (inner + inner.transpose()), "covariance product");
  const double value = (ma - mb).squaredNorm() + sa.trace() + sb.trace() - 2.0 * cross.trace();
  if (!std::isfinite(value)) throw Error(ErrorKind::kMetricFailure, "non-finite Frechet distance");
  return std::max(0.0, value);
}

double ffd(const std::vector<Image<float>>& a, const std::vector<Image<float>>& b, const perception::FeatureExtractor<float>& f) {
  IDINV_REQUIRE(!a.empty() && !b.empty(), "ffd needs two non-empty sets");
  const RowMatrix<double> fa = perception::extract_features(f, a).cast<double>();
  const RowMatrix<double> fb = perception::extract_features(f, b).cast<double>();
  return frechet_distance(fa, fb);
}

MetricReport evaluate_reconstructions(const std::vector<Image<float>>& originals, const std::vector<Image<float>>& reconstructions,
                                      const perception::FeatureExtractor<float>& f, const SwdConfig& swd_cfg) {
  MetricReport r;
  r.mse = mse_metric(originals, reconstructions);
  r.swd = swd(originals, reconstructions, swd_cfg);
  r.ffd = ffd(originals, reconstructions, f);
  r.count_a = originals.size();
  r.count_b = reconstructions.size();
  r.swd_config = swd_cfg;
  return r;
}

std::vector<SemanticBoundary> fit_generator_boundaries(const synthesis::GeneratorModel<float>& g,
                                                       const perception::FeatureExtractor<float>& f, const ProbeConfig& cfg) {
  IDINV_REQUIRE(cfg.boundary_samples >= 2, "boundary fitting needs at least two samples");
  SeededRng rng(cfg.seed);
  std::vector<LatentCode<float>> codes;
  std::vector<Image<float>> images;
  constexpr int kChunk = 128;
  for (int start = 0; start < cfg.boundary_samples; start += kChunk) {
    auto chunk = synthesis::sample_w_codes(g, rng, std::min(kChunk, cfg.boundary_samples - start));
    auto imgs = synthesis::generate(g, chunk);
    codes.insert(codes.end(), chunk.begin(), chunk.end());
    images.insert(images.end(), imgs.begin(), imgs.end());
  }
  const auto probs = training::classify_attributes(f, images);
  const auto x = code_matrix(codes);
  std::vector<SemanticBoundary> out;
  for (Eigen::Index a = 0; a < probs.cols(); ++a) {
    std::vector<int> labels(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) labels[i] = probs(static_cast<Eigen::Index>(i), a) > 0.5f ? 1 : 0;
    const std::string name = a < workspace::kAttributeCount ? workspace::kAttributeNames[static_cast<std::size_t>(a)]
                                                            : "attribute" + std::to_string(a);
    out.push_back(fit_boundary(x, labels, name));
  }
  return out;
}

ProbeResult semantic_probe_experiment(const std::vector<SemanticBoundary>& boundaries, const std::vector<Inverter>& inverters,
                                      const workspace::Dataset& data) {
  IDINV_REQUIRE(data.labeled(), "semantic probing needs labelled images");
  IDINV_REQUIRE(static_cast<Eigen::Index>(boundaries.size()) <= data.labels.cols(), "more boundaries than label columns");
  ProbeResult result;
  result.boundaries = boundaries;
  for (const auto& inv : inverters) {
    const auto x = code_matrix(inv.invert(data.images));
    std::vector<PRCurve> curves;
    for (std::size_t a = 0; a < boundaries.size(); ++a) {
      std::vector<int> labels(data.size());
      for (std::size_t i = 0; i < data.size(); ++i) labels[i] = data.labels(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(a));
      curves.push_back(pr_curve(classify_codes(boundaries[a], x), labels));
    }
    result.inverters.push_back(inv.name);
    result.curves.push_back(std::move(curves));
  }
  return result;
}

ProbeResult semantic_probe_experiment(const synthesis::GeneratorModel<float>& g, const perception::FeatureExtractor<float>& f,
                                      const std::vector<Inverter>& inverters, const workspace::Dataset& data,
                                      const ProbeConfig& cfg) {
  return semantic_probe_experiment(fit_generator_boundaries(g, f, cfg), inverters, data);
}

}  // namespace idinv::evaluation
