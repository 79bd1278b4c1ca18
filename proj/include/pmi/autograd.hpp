#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "pmi/rng.hpp"
#include "pmi/tensor.hpp"
#include "pmi/tensor_ops.hpp"

namespace pmi::ag {

class Node;
using Var = std::shared_ptr<Node>;

// One vertex of the reverse-mode tape. The tape is implicit: ops construct
// nodes whose parents were constructed earlier, so construction order is a
// topological order and backward() replays it in reverse.
class Node {
  public:
    Tensor value;
    Tensor grad;  // undefined until the first accumulation
    bool requires_grad = false;
    std::string name;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
    uint64_t seq = 0;

    const Shape& shape() const { return value.shape(); }
    Tensor grad_or_zeros() const { return grad.defined() ? grad : Tensor::zeros(value.shape(), value.dtype()); }
};

// Disables gradient tracking in scope (evaluation / finite differences).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
};
bool grad_enabled();

Var leaf(Tensor value, bool requires_grad = false, std::string name = {});
Var constant(Tensor value);  // leaf, no grad

// Generic op constructor: checks finiteness of the forward value and wires
// the backward closure only when some parent needs gradients.
Var make_op(const char* op_name, Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw);

// Accumulate `delta` into p's grad (no-op when p does not require grad).
void accumulate(const Var& p, Tensor delta);

// Reverse pass from a scalar loss. Every reachable requires_grad node gets
// its accumulated gradient; leaves not on the path keep an undefined (zero)
// grad.
void backward(const Var& loss);

// --- differentiable ops ---------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var add_const(const Var& x, double c);
Var scale(const Var& x, double c);
Var matmul(const Var& a, const Var& b);
Var permute(const Var& x, std::vector<int> perm);
Var reshape(const Var& x, Shape shape);
Var concat(const std::vector<Var>& parts, int axis);
Var slice(const Var& x, int axis, int64_t start, int64_t len);
Var softmax(const Var& x, int axis);
Var relu(const Var& x);
Var tanh_v(const Var& x);
Var sigmoid(const Var& x);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var sum_axis(const Var& x, int axis);
Var mean_axis(const Var& x, int axis);
Var sum_all(const Var& x);
Var outer_broadcast(const Var& s, const Var& m);
Var expand_batch(const Var& x, int64_t batch);  // prepend a batch dim, repeat
Var dropout(const Var& x, double p, RngStream& stream, bool training);
Var detach(const Var& x);

// softmax(scale * q @ k^T [+ key/support masking]) in one node; avoids
// materializing logits. q,k: [..., Tq, dh] / [..., Tk, dh].
// key_mask: 1/0 over keys, broadcastable [B, Tk] against leading dims.
// support_mask: 1/0 full-shape [..., Tq, Tk]; zeros are excluded pre-softmax.
Var attention_probs(const Var& q, const Var& k, double scale_factor, const Tensor* key_mask = nullptr,
                    const Tensor* support_mask = nullptr);

// Mean over words of embedding-table rows per slot; empty slots give zeros.
// tokens: [batch][slot] -> word ids into table rows.
Var sentence_embed(const Var& table, const std::vector<std::vector<std::vector<int32_t>>>& tokens);

// Row gather: out[i, :] = table[ids[i], :], reshaped to ids_shape + [D].
Var embedding(const Var& table, const std::vector<int32_t>& ids, Shape ids_shape);

// Mean softmax cross-entropy over the batch; logits [B, K], labels in [0, K).
Var cross_entropy(const Var& logits, const std::vector<int32_t>& labels);

}  // namespace pmi::ag
