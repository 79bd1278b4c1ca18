#include "pmi/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <unordered_set>

#include "pmi/error.hpp"

namespace pmi::ag {

namespace {
std::atomic<uint64_t> g_seq{1};
thread_local int g_no_grad_depth = 0;
}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var leaf(Tensor value, bool requires_grad, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    return n;
}

Var constant(Tensor value) { return leaf(std::move(value), false); }

Var make_op(const char* op_name, Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    if (!value.all_finite()) throw NumericError(std::string(op_name) + ": non-finite values in forward output");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
    bool needs = false;
    if (grad_enabled())
        for (const Var& p : parents)
            if (p && p->requires_grad) {
                needs = true;
                break;
            }
    if (needs) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

void accumulate(const Var& p, Tensor delta) {
    if (!p || !p->requires_grad) return;
    if (delta.shape() != p->value.shape())
        throw DimensionError("grad shape " + shape_str(delta.shape()) + " does not match value shape " +
                             shape_str(p->value.shape()) + (p->name.empty() ? "" : " for " + p->name));
    if (!p->grad.defined())
        p->grad = std::move(delta);
    else
        p->grad.add_(delta);
}

void backward(const Var& loss) {
    if (!loss || loss->value.numel() != 1)
        throw UsageError("backward: loss must be a scalar (numel == 1)");
    if (!loss->requires_grad) return;

    // Reachable set; construction order (seq) is already topological.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.get()};
    seen.insert(loss.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const Var& p : n->parents)
            if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq > b->seq; });

    loss->grad = Tensor::full(loss->value.shape(), 1.0, loss->value.dtype());
    for (Node* n : order) {
        if (!n->backward_fn || !n->grad.defined()) continue;
        n->backward_fn(*n);
    }
}

}  // namespace pmi::ag
