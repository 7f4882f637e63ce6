#pragma once

// Two-dimensional projection of operator-token activations and a silhouette
// score measuring how well their labels separate.

#include <cstddef>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arithlens/exprgen.hpp"
#include "arithlens/kernels.hpp"
#include "arithlens/model.hpp"
#include "arithlens/tracing.hpp"

namespace arithlens {

class DegenerateSet : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct LabeledActivationSet {
    Matrix rows;
    std::vector<std::string> labels;
    std::vector<std::size_t> prompt_ids;
    int layer = 0;
    CapturePoint point = CapturePoint::BlockInput;
};

/// Both operator positions of every prompt at (layer, point), labelled with
/// the operator's surface label (appearance order, letter, evaluation order).
LabeledActivationSet operator_activation_set(const ModelBundle& model, std::span<const Expression> prompts, int layer,
                                             CapturePoint point);

struct ProjectedPoint {
    double x = 0.0;
    double y = 0.0;
    std::string label;
    std::size_t prompt_id = 0;
};

/// Centered projection onto the two leading principal directions. Each
/// direction's sign makes its largest-magnitude loading positive.
std::vector<ProjectedPoint> project_2d(const LabeledActivationSet& set);

/// Mean silhouette with Euclidean distance in the full space.
double cluster_separation(const LabeledActivationSet& set);

void write_projection_csv(std::ostream& out, std::span<const ProjectedPoint> points);

}  // namespace arithlens
