#include "arithlens/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <ostream>

#include "arithlens/analysis.hpp"

namespace arithlens {

LabeledActivationSet operator_activation_set(const ModelBundle& model, std::span<const Expression> prompts, int layer,
                                             CapturePoint point) {
    LabeledActivationSet set;
    set.layer = layer;
    set.point = point;
    set.rows = collect_activations(model, prompts, {layer, point}, operator_positions_of);
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        for (const auto& label : prompts[i].labels) {
            set.labels.push_back(label.surface());
            set.prompt_ids.push_back(i);
        }
    }
    return set;
}

std::vector<ProjectedPoint> project_2d(const LabeledActivationSet& set) {
    const auto n = static_cast<Eigen::Index>(set.rows.rows());
    const auto d = static_cast<Eigen::Index>(set.rows.cols());
    if (n < 3) throw DegenerateSet("projection needs at least 3 rows");
    if (set.labels.size() != set.rows.rows()) throw std::invalid_argument("projection: labels and rows differ in length");

    using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const Eigen::Map<const RowMajor> x(set.rows.values().data(), n, d);
    const RowMajor centered = x.rowwise() - x.colwise().mean();
    const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(n);
    if (!(cov.trace() > 0.0)) throw DegenerateSet("projection input has zero variance");

    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    Eigen::MatrixXd axes(d, 2);
    for (int c = 0; c < 2; ++c) {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
        if (d > c) v = eig.eigenvectors().col(d - 1 - c);
        Eigen::Index largest = 0;
        v.cwiseAbs().maxCoeff(&largest);
        if (v(largest) < 0.0) v = -v;
        axes.col(c) = v;
    }
    const Eigen::MatrixXd coords = centered * axes;

    std::vector<ProjectedPoint> out(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        out[u] = {coords(i, 0), coords(i, 1), set.labels[u], u < set.prompt_ids.size() ? set.prompt_ids[u] : u};
    }
    return out;
}

double cluster_separation(const LabeledActivationSet& set) {
    const std::size_t n = set.rows.rows();
    if (set.labels.size() != n) throw std::invalid_argument("silhouette: labels and rows differ in length");
    std::map<std::string, std::size_t> ids;
    for (const auto& l : set.labels) ids.emplace(l, 0);
    if (ids.size() < 2) throw DegenerateSet("silhouette needs at least two labels");
    std::size_t next = 0;
    for (auto& [_, id] : ids) id = next++;
    std::vector<std::size_t> label(n), sizes(ids.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
        label[i] = ids.at(set.labels[i]);
        ++sizes[label[i]];
    }
    if (std::ranges::any_of(sizes, [](std::size_t s) { return s < 2; })) {
        throw DegenerateSet("silhouette needs at least two rows per label");
    }

    // Rows are processed in blocks so the distance matrix is never held whole.
    constexpr std::size_t kBlock = 128;
    const ConstMatRef all = set.rows.cref();
    Matrix dist;
    std::vector<double> sums(ids.size());
    double total = 0.0;
    for (std::size_t start = 0; start < n; start += kBlock) {
        const std::size_t rows = std::min(kBlock, n - start);
        dist.resize(rows, n);
        kernels::pairwise_distances({all.row(start), rows, all.cols}, all, dist.ref());
        for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t i = start + r;
            std::ranges::fill(sums, 0.0);
            const auto drow = dist.row(r);
            for (std::size_t j = 0; j < n; ++j) sums[label[j]] += drow[j];
            const std::size_t own = label[i];
            const double a = sums[own] / static_cast<double>(sizes[own] - 1);
            double b = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < sums.size(); ++c) {
                if (c != own) b = std::min(b, sums[c] / static_cast<double>(sizes[c]));
            }
            const double denom = std::max(a, b);
            total += denom > 0.0 ? (b - a) / denom : 0.0;
        }
    }
    return total / static_cast<double>(n);
}

void write_projection_csv(std::ostream& out, std::span<const ProjectedPoint> points) {
    out << "x,y,label,prompt_id\n";
    const auto old = out.precision(17);
    for (const auto& p : points) out << p.x << ',' << p.y << ',' << p.label << ',' << p.prompt_id << '\n';
    out.precision(old);
}

}  // namespace arithlens
