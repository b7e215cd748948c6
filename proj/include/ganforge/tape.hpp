#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ganforge/errors.hpp"
#include "ganforge/tensor.hpp"

namespace ganforge {

template <typename S>
using GradMap = std::unordered_map<std::int64_t, Tensor<S>>;

// Adds `delta` into the gradient buffer for tensor `id`.
template <typename S>
void accumulate_grad(GradMap<S>& grads, std::int64_t id, const Tensor<S>& delta) {
    auto it = grads.find(id);
    if (it == grads.end()) {
        grads.emplace(id, delta);
        return;
    }
    if (!it->second.same_shape(delta))
        throw ShapeError("gradient shape " + shape_str(delta.shape()) + " conflicts with existing " +
                         shape_str(it->second.shape()));
    S* dst = it->second.data();
    const S* src = delta.data();
    const std::int64_t n = delta.size();
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

// Reverse-mode record of one forward computation. Nodes are appended in
// execution order, which is by construction a topological order. A tape is
// single-writer; concurrent forward passes need separate tapes.
template <typename S>
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    // pull(dout, grads): accumulate d(out)/d(parent) * dout into each parent's buffer.
    void record(std::int64_t out_id, std::vector<std::int64_t> parents,
                std::function<void(const Tensor<S>&, GradMap<S>&)> pull) {
        if (!recording_) return;
        outputs_.insert(out_id);
        nodes_.push_back(Node{out_id, std::move(parents), std::move(pull)});
    }

    void mark_parameter(const Tensor<S>& p) {
        if (param_set_.insert(p.id()).second) params_.push_back({p.id(), p.shape()});
    }

    bool produced(std::int64_t id) const { return outputs_.count(id) != 0; }
    std::size_t node_count() const { return nodes_.size(); }

    // Walks the record backwards from `loss`, returning gradients keyed by
    // tensor id. Every marked parameter ends up with a buffer of its own
    // shape even if the loss never touched it.
    GradMap<S> backward(const Tensor<S>& loss) const {
        if (loss.size() != 1)
            throw ArgumentError("backward: loss must have exactly one element, got shape " + shape_str(loss.shape()));
        if (!produced(loss.id()))
            throw TraceError("backward: loss tensor (id " + std::to_string(loss.id()) + ") is not on this tape");

        GradMap<S> grads;
        grads.emplace(loss.id(), Tensor<S>::full(loss.shape(), S(1)));

        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            auto found = grads.find(it->out_id);
            if (found == grads.end()) continue;
            // Copy: the pull may legally touch the map it feeds.
            const Tensor<S> dout = found->second;
            it->pull(dout, grads);
        }

        for (const auto& [id, shape] : params_) {
            if (grads.find(id) == grads.end()) grads.emplace(id, Tensor<S>(shape));
        }
        for (const auto& [id, shape] : params_) {
            grads.at(id).require_finite("backward(parameter id " + std::to_string(id) + ")");
        }
        return grads;
    }

private:
    struct Node {
        std::int64_t out_id;
        std::vector<std::int64_t> parents;
        std::function<void(const Tensor<S>&, GradMap<S>&)> pull;
    };

    std::vector<Node> nodes_;
    std::unordered_set<std::int64_t> outputs_;
    std::vector<std::pair<std::int64_t, Shape>> params_;
    std::unordered_set<std::int64_t> param_set_;
    bool recording_;
};

// Free-function spelling of the tape walk.
template <typename S>
GradMap<S> backward(const Tensor<S>& loss, const Tape<S>& tape) {
    return tape.backward(loss);
}

}  // namespace ganforge
