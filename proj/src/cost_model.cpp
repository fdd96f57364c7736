#include "dfa/cost_model.hpp"

#include <iomanip>
#include <sstream>

namespace dfa {

namespace {

const char* kConventionNote =
    "MAC convention: conv H'*W'*Cout*(Cin/g)*k^2, FC K*C; BN/activation/bias/"
    "shortcut-add/pooling/bilinear excluded; 1 reported FLOP = 1 MAC. Raw parameter "
    "counts; multiply by 4 to compare against tables quoting 32-bit storage bytes.";

// Walks layers in forward order. `observe` swaps the analytic shape transfer
// for the shapes recorded by the last executed forward.
struct CostWalker {
    std::vector<CostRow> rows;
    bool observe = false;

    Shape4 conv(const Conv2dLayer& l, Shape4 in) {
        Shape4 out = observe ? l.last_out : l.p.out_shape(in);
        rows.push_back({l.name, out, l.p.param_count(), l.p.macs(in)});
        return out;
    }
    Shape4 bn(const BatchNormLayer& l, Shape4 in) {
        Shape4 out = observe ? l.last_out : in;
        rows.push_back({l.name, out, 2 * l.channels, 0});
        return out;
    }
    Shape4 fc(const FcLayer& l, Shape4 in) {
        Shape4 out = observe ? l.last_out : Shape4{in.n, l.out, 1, 1};
        rows.push_back({l.name, out, l.out * l.in + l.out, in.n * l.out * l.in});
        return out;
    }
    Shape4 cbr(const ConvBnRelu& l, Shape4 in) { return bn(l.bn, conv(l.conv, in)); }
    Shape4 sep(const SepConv& l, Shape4 in) { return cbr(l.pw, cbr(l.dw, in)); }
    Shape4 block(const XceptionBlock& b, Shape4 in) {
        Shape4 out = sep(b.s3, sep(b.s2, sep(b.s1, in)));
        if (b.proj) bn(*b.proj_bn, conv(*b.proj, in));
        return out;
    }
    Shape4 stage(const Stage& st, Shape4 in) {
        Shape4 s = in;
        for (const auto& b : st.blocks) s = block(b, s);
        return s;
    }
    // Returns the fca shape (equal to enc4) after the attention head rows.
    Shape4 attention(const FcAttention& a, Shape4 enc4) {
        Shape4 pooled{enc4.n, enc4.c, 1, 1};
        Shape4 hidden = fc(a.fc, pooled);
        conv(a.conv, hidden);
        return enc4;
    }

    // Mirrors Backbone::forward; returns the stage output shapes.
    struct StageShapes {
        Shape4 enc2, enc3, enc4;
    };
    StageShapes backbone(const Backbone& bb, Shape4 in) {
        Shape4 cur = in;
        if (bb.has_conv1()) cur = cbr(const_cast<Backbone&>(bb).conv1(), cur);
        StageShapes out;
        out.enc2 = stage(bb.stage(0), cur);
        out.enc3 = stage(bb.stage(1), out.enc2);
        out.enc4 = stage(bb.stage(2), out.enc3);
        attention(bb.attention(), out.enc4);
        return out;
    }
};

void validate_model_input(const DfaNet& model, const Shape4& in) {
    if (in.c != 3) throw ShapeError("cost model: input must have 3 channels, got " + in.str());
    const int64_t div = model.spec().required_divisor();
    if (in.h % div != 0 || in.w % div != 0)
        throw ShapeError("cost model: input extents must be divisible by " + std::to_string(div) +
                         ", got " + in.str());
}

// Mirrors DfaNet::encoder_forward + Decoder::forward shape wiring.
CostWalker walk_model(const DfaNet& model, Shape4 in, bool include_decoder, bool observe) {
    validate_model_input(model, in);
    CostWalker w;
    w.observe = observe;
    const auto& bbs = model.backbones();
    std::vector<CostWalker::StageShapes> traces;
    traces.push_back(w.backbone(bbs[0], in));
    const int up = model.spec().interbackbone_upsample;
    for (size_t n = 1; n < bbs.size(); ++n) {
        const auto& prev = traces.back();
        CostWalker::StageShapes out;
        Shape4 entry{prev.enc4.n, prev.enc4.c, prev.enc4.h * up, prev.enc4.w * up};
        Shape4 enc2_in{entry.n, entry.c + prev.enc2.c, entry.h, entry.w};
        Shape4 cur = enc2_in;
        out.enc2 = w.stage(bbs[n].stage(0), cur);
        Shape4 enc3_in{out.enc2.n, out.enc2.c + prev.enc3.c, out.enc2.h, out.enc2.w};
        out.enc3 = w.stage(bbs[n].stage(1), enc3_in);
        Shape4 enc4_in{out.enc3.n, out.enc3.c + prev.enc4.c, out.enc3.h, out.enc3.w};
        out.enc4 = w.stage(bbs[n].stage(2), enc4_in);
        w.attention(bbs[n].attention(), out.enc4);
        traces.push_back(out);
    }
    if (include_decoder) {
        const Decoder& dec = model.decoder();
        const int64_t th = traces[0].enc2.h;
        const int64_t tw = traces[0].enc2.w;
        for (size_t i = 0; i < traces.size(); ++i) w.cbr(dec.ll_reduce[i], traces[i].enc2);
        int64_t hl_c = 0;
        for (size_t i = 0; i < traces.size(); ++i)
            hl_c += w.cbr(dec.hl_reduce[i], traces[i].enc4).c;
        Shape4 fused_in{in.n, hl_c, th, tw};
        Shape4 fused = w.cbr(dec.hl_fuse, fused_in);
        w.conv(dec.head, fused);
    }
    return w;
}

CostReport make_report(std::vector<CostRow> rows) {
    CostReport r;
    r.rows = std::move(rows);
    r.convention_note = kConventionNote;
    r.finalize();
    return r;
}

}  // namespace

void CostReport::finalize() {
    total_params = 0;
    total_macs = 0;
    for (const auto& row : rows) {
        total_params += row.params;
        total_macs += row.macs;
    }
}

CostReport analyze_model(const DfaNet& model, Shape4 input) {
    return make_report(walk_model(model, input, true, false).rows);
}

CostReport analyze_spec(const ModelSpec& spec, Shape4 input) {
    DfaNet model(spec, 0);
    return analyze_model(model, input);
}

CostReport analyze_backbone(Variant v, Shape4 input) { return analyze_backbone_stack(v, 1, input); }

CostReport analyze_backbone_stack(Variant v, int num_backbones, Shape4 input) {
    ModelSpec spec;
    spec.variant = v;
    spec.num_backbones = num_backbones;
    spec.num_classes = 19;
    DfaNet model(build_dfanet(spec), 0);
    return make_report(walk_model(model, input, false, false).rows);
}

std::vector<std::pair<std::string, Shape4>> infer_shapes(const DfaNet& model, Shape4 input) {
    std::vector<std::pair<std::string, Shape4>> out;
    for (const auto& row : walk_model(model, input, true, false).rows)
        out.emplace_back(row.name, row.out_shape);
    return out;
}

std::vector<std::pair<std::string, Shape4>> collect_observed_shapes(const DfaNet& model) {
    // Input shape is irrelevant in observe mode, but the walk still needs a
    // valid one for validation; reconstruct it from the recorded conv shapes.
    const int64_t div = model.spec().required_divisor();
    Shape4 nominal{1, 3, div, div};
    std::vector<std::pair<std::string, Shape4>> out;
    for (const auto& row : walk_model(model, nominal, true, true).rows)
        out.emplace_back(row.name, row.out_shape);
    return out;
}

namespace {

std::string shape_str(const Shape4& s) {
    return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" +
           std::to_string(s.w);
}

Shape4 parse_shape(const std::string& text) {
    Shape4 s;
    if (std::sscanf(text.c_str(), "%ldx%ldx%ldx%ld", &s.n, &s.c, &s.h, &s.w) != 4)
        throw ParseError("bad shape field '" + text + "'");
    return s;
}

}  // namespace

std::string emit_report(const CostReport& report, ReportFormat format) {
    std::ostringstream os;
    if (format == ReportFormat::Csv) {
        os << "# " << report.convention_note << "\n";
        os << "layer,output_shape,params,macs\n";
        for (const auto& r : report.rows)
            os << r.name << "," << shape_str(r.out_shape) << "," << r.params << "," << r.macs
               << "\n";
        os << "TOTAL,," << report.total_params << "," << report.total_macs << "\n";
        return os.str();
    }
    size_t name_w = 5;
    for (const auto& r : report.rows) name_w = std::max(name_w, r.name.size());
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "layer" << std::setw(20)
       << "output_shape" << std::right << std::setw(14) << "params" << std::setw(16) << "macs"
       << "\n";
    for (const auto& r : report.rows)
        os << std::left << std::setw(static_cast<int>(name_w) + 2) << r.name << std::setw(20)
           << shape_str(r.out_shape) << std::right << std::setw(14) << r.params << std::setw(16)
           << r.macs << "\n";
    os << std::left << std::setw(static_cast<int>(name_w) + 2) << "TOTAL" << std::setw(20) << ""
       << std::right << std::setw(14) << report.total_params << std::setw(16) << report.total_macs
       << "\n";
    os << "note: " << report.convention_note << "\n";
    return os.str();
}

CostReport parse_report_csv(const std::string& text) {
    CostReport report;
    std::istringstream is(text);
    std::string line;
    bool saw_header = false;
    int64_t total_params = -1, total_macs = -1;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            if (report.convention_note.empty() && line.size() > 2)
                report.convention_note = line.substr(2);
            continue;
        }
        if (!saw_header) {
            if (line != "layer,output_shape,params,macs")
                throw ParseError("bad report header '" + line + "'");
            saw_header = true;
            continue;
        }
        std::array<std::string, 4> fields;
        size_t start = 0;
        for (int f = 0; f < 4; ++f) {
            const size_t comma = line.find(',', start);
            if (f < 3 && comma == std::string::npos)
                throw ParseError("bad report row '" + line + "'");
            fields[static_cast<size_t>(f)] =
                f < 3 ? line.substr(start, comma - start) : line.substr(start);
            start = comma + 1;
        }
        if (fields[0] == "TOTAL") {
            total_params = std::stoll(fields[2]);
            total_macs = std::stoll(fields[3]);
            continue;
        }
        report.rows.push_back({fields[0], parse_shape(fields[1]), std::stoll(fields[2]),
                               std::stoll(fields[3])});
    }
    if (!saw_header) throw ParseError("report has no header row");
    report.finalize();
    if (total_params >= 0 && (total_params != report.total_params || total_macs != report.total_macs))
        throw ParseError("report TOTAL row does not match column sums");
    return report;
}

}  // namespace dfa
