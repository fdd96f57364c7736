#pragma once

#include <string>
#include <vector>

#include "dfa/model.hpp"

namespace dfa {

struct CostRow {
    std::string name;
    Shape4 out_shape;
    int64_t params = 0;
    int64_t macs = 0;
};

// Analytic complexity report. MAC convention: convolutions count
// H'*W'*out*(in/groups)*k^2 per batch item, FC layers K*C; BN, activations,
// biases, shortcut adds, pooling and bilinear interpolation are excluded.
struct CostReport {
    std::vector<CostRow> rows;
    int64_t total_params = 0;
    int64_t total_macs = 0;
    std::string convention_note;

    void finalize();  // recomputes totals from rows
};

enum class ReportFormat { Table, Csv };

// Shape/parameter/MAC walk over a built model, mirroring forward wiring
// without touching tensor data.
CostReport analyze_model(const DfaNet& model, Shape4 input);
CostReport analyze_spec(const ModelSpec& spec, Shape4 input);

// Single backbone (with FC attention) and encoder-only stacks; the decoder is
// excluded from both.
CostReport analyze_backbone(Variant v, Shape4 input);
CostReport analyze_backbone_stack(Variant v, int num_backbones, Shape4 input);

// Per-layer output shapes as recorded by the analytic walk.
std::vector<std::pair<std::string, Shape4>> infer_shapes(const DfaNet& model, Shape4 input);

// Shapes observed by the most recent executed forward, in walk order.
std::vector<std::pair<std::string, Shape4>> collect_observed_shapes(const DfaNet& model);

std::string emit_report(const CostReport& report, ReportFormat format);
CostReport parse_report_csv(const std::string& text);

}  // namespace dfa
