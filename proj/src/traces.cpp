#include "pmi/traces.hpp"

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pmi/error.hpp"

namespace pmi {

std::vector<std::string> trace_row_labels(const TaskMeta& meta) {
    std::vector<std::string> labels;
    if (meta.text) {
        for (int64_t i = 1; i <= meta.s_max; ++i) labels.push_back("S" + std::to_string(i));
        labels.push_back("Q");
        labels.push_back("CLS");
    } else {
        labels.push_back("CLS");
        for (int64_t i = 1; i <= meta.patches(); ++i) labels.push_back("P" + std::to_string(i));
    }
    return labels;
}

namespace {

Tensor head_average(const Tensor& probs, int64_t example) {
    // probs: [B, H, Tq, Tk] -> [Tq, Tk]
    const int64_t H = probs.dim(1), Tq = probs.dim(2), Tk = probs.dim(3);
    Tensor out = Tensor::zeros({Tq, Tk}, probs.dtype());
    for (int64_t i = 0; i < Tq * Tk; ++i) {
        double acc = 0.0;
        for (int64_t h = 0; h < H; ++h) acc += probs.get(((example * H + h) * Tq * Tk) + i);
        out.set(i, acc / static_cast<double>(H));
    }
    return out;
}

Tensor head_slice(const Tensor& probs, int64_t example, int64_t head) {
    const int64_t H = probs.dim(1), Tq = probs.dim(2), Tk = probs.dim(3);
    Tensor out = Tensor::zeros({Tq, Tk}, probs.dtype());
    for (int64_t i = 0; i < Tq * Tk; ++i) out.set(i, probs.get(((example * H + head) * Tq * Tk) + i));
    return out;
}

void write_matrix_csv(const std::string& path, const Tensor& m, const std::vector<std::string>& row_labels) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    const int64_t rows = m.dim(0), cols = m.dim(1);
    out << "position";
    for (int64_t c = 0; c < cols; ++c) out << ",m" << (c + 1);
    out << "\n";
    char buf[64];
    for (int64_t r = 0; r < rows; ++r) {
        out << (r < static_cast<int64_t>(row_labels.size()) ? row_labels[static_cast<size_t>(r)]
                                                            : "row" + std::to_string(r));
        for (int64_t c = 0; c < cols; ++c) {
            std::snprintf(buf, sizeof(buf), "%.9g", m.get(r * cols + c));
            out << ',' << buf;
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace

std::vector<std::string> dump_trace_files(const TraceSink& sink, const TaskMeta& meta,
                                          const std::string& out_dir, const TraceDumpOptions& opt) {
    std::filesystem::create_directories(out_dir);
    const auto labels = trace_row_labels(meta);
    std::vector<std::string> files;
    nlohmann::json manifest;
    manifest["row_labels"] = labels;
    manifest["per_head"] = opt.per_head;
    manifest["example"] = opt.example;
    nlohmann::json entries = nlohmann::json::array();

    for (const AttentionTrace& tr : sink.traces) {
        if (tr.kind == TraceKind::WmWrite) continue;  // read-path matrices only (Figs. 6-7 orientation)
        const std::string kind = trace_kind_name(tr.kind);
        const int64_t H = tr.probs.dim(1);
        const int64_t heads = opt.per_head ? H : 1;
        for (int64_t h = 0; h < heads; ++h) {
            std::string name = "trace_L" + std::to_string(tr.layer) + "_" + kind;
            if (opt.per_head) name += "_h" + std::to_string(h);
            name += ".csv";
            Tensor m = opt.per_head ? head_slice(tr.probs, opt.example, h) : head_average(tr.probs, opt.example);
            write_matrix_csv(out_dir + "/" + name, m, labels);
            files.push_back(name);
            nlohmann::json e;
            e["file"] = name;
            e["layer"] = tr.layer;
            e["kind"] = kind;
            e["rows"] = m.dim(0);
            e["cols"] = m.dim(1);
            if (opt.per_head) e["head"] = h;
            entries.push_back(e);
        }
    }
    manifest["files"] = entries;
    std::ofstream mf(out_dir + "/manifest.json");
    if (!mf) throw IoError("cannot write trace manifest");
    mf << manifest.dump(2) << "\n";
    return files;
}

Tensor read_trace_csv(const std::string& path, std::vector<std::string>* row_labels) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open trace file " + path);
    std::string line;
    if (!std::getline(in, line)) throw DataError(path + ": empty trace file");
    std::vector<std::vector<double>> rows;
    std::vector<std::string> labels;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string cell;
        std::getline(ss, cell, ',');
        labels.push_back(cell);
        std::vector<double> row;
        while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw DataError(path + ": no data rows");
    Tensor out = Tensor::zeros({static_cast<int64_t>(rows.size()), static_cast<int64_t>(rows[0].size())},
                               DType::F32);
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows[0].size()) throw DataError(path + ": ragged rows");
        for (size_t c = 0; c < rows[r].size(); ++c)
            out.set(static_cast<int64_t>(r * rows[0].size() + c), rows[r][c]);
    }
    if (row_labels) *row_labels = std::move(labels);
    return out;
}

}  // namespace pmi
