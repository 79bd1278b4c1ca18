#pragma once

#include <string>
#include <vector>

#include "pmi/attention.hpp"
#include "pmi/model.hpp"

namespace pmi {

struct TraceDumpOptions {
    bool per_head = false;  // default: head-averaged, one matrix per (layer, kind)
    int64_t example = 0;    // batch element to export
};

// Row labels for the trace matrices: S1..S_max, Q, CLS for text; CLS, P1..Pn
// for images.
std::vector<std::string> trace_row_labels(const TaskMeta& meta);

// Writes the read-path matrices (wm: dense read, rows sum to 1; ltm: sparse
// read, <= k nonzeros per row) as trace_L<layer>_<kind>[_h<h>].csv plus
// manifest.json. Returns the matrix file names in written order.
std::vector<std::string> dump_trace_files(const TraceSink& sink, const TaskMeta& meta,
                                          const std::string& out_dir, const TraceDumpOptions& opt = {});

// CSV round-trip helper (values printed with 9 significant digits).
Tensor read_trace_csv(const std::string& path, std::vector<std::string>* row_labels = nullptr);

}  // namespace pmi
