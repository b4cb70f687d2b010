#pragma once

// Binary regression trees over fixed cutpoint grids: the structural half of
// the sum-of-trees model.  Trees are stored in a small arena with a free
// list, so grow/prune never invalidates other node indices.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace survdtr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Per-covariate split values.  An empty grid means the covariate is constant
// in the training data and is never proposed for splitting.
using Cutpoints = std::vector<std::vector<double>>;

// Uniformly spaced interior cutpoints between the observed min and max.
// Two-valued covariates get the single midpoint (0.5 for 0/1 indicators).
inline Cutpoints build_cutpoints(const Matrix& X, int numcut) {
    if (numcut < 1) throw std::invalid_argument("build_cutpoints: numcut must be >= 1");
    Cutpoints grids(static_cast<std::size_t>(X.cols()));
    for (Eigen::Index j = 0; j < X.cols(); ++j) {
        double lo = X(0, j), hi = X(0, j);
        double second = std::numeric_limits<double>::quiet_NaN();
        bool two_valued = true;
        for (Eigen::Index i = 1; i < X.rows(); ++i) {
            double v = X(i, j);
            lo = std::min(lo, v);
            hi = std::max(hi, v);
            if (v != X(0, j)) {
                if (std::isnan(second)) second = v;
                else if (v != second) two_valued = false;
            }
        }
        if (lo == hi) continue;  // constant: excluded from splitting
        auto& g = grids[static_cast<std::size_t>(j)];
        if (two_valued) {
            g.push_back(0.5 * (lo + hi));
        } else {
            double step = (hi - lo) / (numcut + 1);
            g.reserve(static_cast<std::size_t>(numcut));
            for (int c = 1; c <= numcut; ++c) g.push_back(lo + c * step);
        }
    }
    return grids;
}

struct TreeNode {
    int left = -1;          // -1 on both children marks a leaf
    int right = -1;
    int parent = -1;
    int var = -1;           // split variable (internal nodes only)
    int cut_index = -1;     // index into the variable's cutpoint grid
    double cut_value = 0.0; // cached split value, so snapshots predict standalone
    double leaf_mean = 0.0; // leaf payload (leaves only)

    bool is_leaf() const { return left < 0; }
};

class Tree {
public:
    Tree() { nodes_.push_back(TreeNode{}); }

    const TreeNode& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
    TreeNode& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }
    int root() const { return 0; }

    int depth(int i) const {
        int d = 0;
        while (nodes_[static_cast<std::size_t>(i)].parent >= 0) {
            i = nodes_[static_cast<std::size_t>(i)].parent;
            ++d;
        }
        return d;
    }

    std::vector<int> leaves() const {
        std::vector<int> out;
        collect(0, [&](int i) { if (node(i).is_leaf()) out.push_back(i); });
        return out;
    }

    // "nog" = internal node whose children are both leaves; the only nodes a
    // prune move may collapse.
    std::vector<int> nogs() const {
        std::vector<int> out;
        collect(0, [&](int i) {
            const auto& nd = node(i);
            if (!nd.is_leaf() && node(nd.left).is_leaf() && node(nd.right).is_leaf()) out.push_back(i);
        });
        return out;
    }

    int leaf_count() const {
        int c = 0;
        collect(0, [&](int i) { if (node(i).is_leaf()) ++c; });
        return c;
    }

    // Upper bound on node indices (arena slots, live or freed).
    int arena_size() const { return static_cast<int>(nodes_.size()); }

    // Split a leaf; returns {left, right} child indices.
    std::pair<int, int> grow(int leaf, int var, int cut_index, double cut_value) {
        if (!node(leaf).is_leaf()) throw std::invalid_argument("grow: node is not a leaf");
        int l = allocate(), r = allocate();
        auto& nd = node(leaf);
        nd.left = l;
        nd.right = r;
        nd.var = var;
        nd.cut_index = cut_index;
        nd.cut_value = cut_value;
        node(l).parent = leaf;
        node(r).parent = leaf;
        return {l, r};
    }

    // Collapse a nog node back into a leaf.
    void prune(int nog) {
        auto& nd = node(nog);
        if (nd.is_leaf() || !node(nd.left).is_leaf() || !node(nd.right).is_leaf()) {
            throw std::invalid_argument("prune: node is not a nog");
        }
        release(nd.left);
        release(nd.right);
        nd.left = nd.right = -1;
        nd.var = nd.cut_index = -1;
        nd.cut_value = 0.0;
    }

    // Leaf index reached by covariate row `x`.
    template <typename RowLike>
    int route(const RowLike& x) const {
        int i = 0;
        while (!node(i).is_leaf()) {
            const auto& nd = node(i);
            i = (x[nd.var] < nd.cut_value) ? nd.left : nd.right;
        }
        return i;
    }

    template <typename RowLike>
    double evaluate(const RowLike& x) const { return node(route(x)).leaf_mean; }

private:
    int allocate() {
        if (!free_.empty()) {
            int i = free_.back();
            free_.pop_back();
            nodes_[static_cast<std::size_t>(i)] = TreeNode{};
            return i;
        }
        nodes_.push_back(TreeNode{});
        return static_cast<int>(nodes_.size()) - 1;
    }

    void release(int i) {
        nodes_[static_cast<std::size_t>(i)] = TreeNode{};
        free_.push_back(i);
    }

    template <typename F>
    void collect(int i, F&& f) const {
        f(i);
        const auto& nd = node(i);
        if (!nd.is_leaf()) {
            collect(nd.left, f);
            collect(nd.right, f);
        }
    }

    std::vector<TreeNode> nodes_;
    std::vector<int> free_;
};

} // namespace survdtr
