#pragma once

// Sum-of-trees Bayesian regression (BART) with the Chipman-style priors:
// split probability alpha*(1+depth)^-beta, conjugate normal leaf means,
// scaled-inverse-chi-square sigma^2, and a two-move (grow/prune)
// Metropolis-Hastings backfitting Gibbs sampler.

#include <survdtr/rng.hpp>
#include <survdtr/tree.hpp>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace survdtr {

struct BartHyper {
    int m = 200;               // number of trees
    double k = 2.0;            // leaf-prior scale
    double alpha_base = 0.95;  // split prior base
    double beta_power = 2.0;   // split prior power
    double nu = 3.0;           // sigma^2 prior degrees of freedom
    double q = 0.90;           // sigma^2 prior calibration quantile
    int numcut = 100;          // cutpoints per continuous covariate
    int min_node_size = 5;     // smallest training-reachable leaf

    void validate() const {
        if (m < 1) throw std::invalid_argument("BartHyper: m must be >= 1");
        if (!(k > 0.0)) throw std::invalid_argument("BartHyper: k must be positive");
        if (!(alpha_base > 0.0 && alpha_base < 1.0)) throw std::invalid_argument("BartHyper: alpha_base outside (0,1)");
        if (!(beta_power >= 0.0)) throw std::invalid_argument("BartHyper: beta_power must be >= 0");
        if (!(nu > 0.0)) throw std::invalid_argument("BartHyper: nu must be positive");
        if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("BartHyper: q outside (0,1)");
        if (numcut < 1) throw std::invalid_argument("BartHyper: numcut must be >= 1");
        if (min_node_size < 1) throw std::invalid_argument("BartHyper: min_node_size must be >= 1");
    }
};

struct SumOfTreesState {
    std::vector<Tree> forest;
    std::vector<std::vector<int>> leaf_of_row;  // per tree: training row -> leaf node
    std::vector<std::vector<double>> fits;      // per tree: cached g(x_i; T_j, M_j)
    std::vector<double> total_fit;              // sum over trees, per row
    double sigma2 = 1.0;
    double offset_mu = 0.0;                     // fixed centering; predictions add it back
    double lambda = 1.0;                        // calibrated sigma^2 prior scale
    double sigma_mu2 = 1.0;                     // leaf-mean prior variance, fixed at init
    Eigen::Index n_cols = 0;                    // training covariate count (prediction schema)
};

// log of the leaf marginal likelihood: integral of prod N(r_i; mu, sigma2)
// against the N(0, sigma_mu2) prior on mu.  Empty subsets integrate to 1.
inline double node_marginal_loglik(int n, double sum_r, double sum_r2, double sigma2, double sigma_mu2) {
    if (n == 0) return 0.0;
    double precision = n / sigma2 + 1.0 / sigma_mu2;
    return -0.5 * n * std::log(2.0 * M_PI * sigma2)
         - 0.5 * sum_r2 / sigma2
         - 0.5 * std::log(sigma_mu2 * precision)
         + 0.5 * (sum_r / sigma2) * (sum_r / sigma2) / precision;
}

inline double node_marginal_loglik(const std::vector<double>& residuals, double sigma2, double sigma_mu2) {
    double s = 0.0, s2 = 0.0;
    for (double r : residuals) {
        s += r;
        s2 += r * r;
    }
    return node_marginal_loglik(static_cast<int>(residuals.size()), s, s2, sigma2, sigma_mu2);
}

namespace detail {

inline double split_prob(double alpha, double beta, int depth) {
    return alpha * std::pow(1.0 + depth, -beta);
}

// Least-squares residual variance of y on [1, X]; used only to calibrate the
// sigma^2 prior scale.
inline double calibration_variance(const Vector& y, const Matrix& X) {
    const Eigen::Index n = y.size();
    double var_y = (n > 1) ? (y.array() - y.mean()).square().sum() / static_cast<double>(n - 1) : 0.0;
    if (X.cols() <= n - 2 && n >= 3) {
        Matrix D(n, X.cols() + 1);
        D.col(0).setOnes();
        D.rightCols(X.cols()) = X;
        Vector beta = D.colPivHouseholderQr().solve(y);
        double rss = (y - D * beta).squaredNorm();
        double dof = static_cast<double>(n) - static_cast<double>(D.cols());
        if (dof >= 1.0) {
            double est = rss / dof;
            if (std::isfinite(est) && est > 0.0) return est;
        }
    }
    return (std::isfinite(var_y) && var_y > 0.0) ? var_y : 1e-10;
}

struct LeafStats {
    int n = 0;
    double sum = 0.0;
    double sum2 = 0.0;
    void add(double r) { ++n; sum += r; sum2 += r * r; }
};

inline bool any_splittable_var(const Cutpoints& cuts) {
    return std::any_of(cuts.begin(), cuts.end(), [](const auto& g) { return !g.empty(); });
}

// A tree can grow iff some covariate splits and some leaf could hold two
// children of min_node_size rows each (necessary condition; the sampled
// proposal may still be rejected as invalid).
inline bool can_grow(const std::vector<int>& leaf_of_row, const Cutpoints& cuts, int min_node_size) {
    if (!any_splittable_var(cuts)) return false;
    std::vector<int> counts;
    for (int leaf : leaf_of_row) {
        if (leaf >= static_cast<int>(counts.size())) counts.resize(static_cast<std::size_t>(leaf) + 1, 0);
        if (++counts[static_cast<std::size_t>(leaf)] >= 2 * min_node_size) return true;
    }
    return false;
}

// P(propose grow) given which moves are legal; P(propose prune) mirrors it.
inline double grow_prob(bool grow_ok, bool prune_ok) {
    if (grow_ok && prune_ok) return 0.5;
    return grow_ok ? 1.0 : 0.0;
}

} // namespace detail

// One grow/prune Metropolis-Hastings update of one tree given its partial
// residuals.  Mutates tree and leaf_of_row only on acceptance.  The proposal
// draws (var, cut) uniformly over the same grids the tree prior uses, so the
// rule probabilities cancel in the acceptance ratio.
inline void propose_tree_move(Tree& tree, std::vector<int>& leaf_of_row, const Matrix& X,
                              const std::vector<double>& residual, double sigma2, double sigma_mu2,
                              const BartHyper& hyper, const Cutpoints& cuts, RngStream& rng) {
    const int n = static_cast<int>(residual.size());
    const bool grow_ok = detail::can_grow(leaf_of_row, cuts, hyper.min_node_size);
    const auto nogs = tree.nogs();
    const bool prune_ok = !nogs.empty();
    if (!grow_ok && !prune_ok) return;
    const bool do_grow = grow_ok && (!prune_ok || rng.uniform() < 0.5);
    const double alpha = hyper.alpha_base, beta = hyper.beta_power;

    if (do_grow) {
        std::vector<int> avail_vars;
        for (std::size_t v = 0; v < cuts.size(); ++v) {
            if (!cuts[v].empty()) avail_vars.push_back(static_cast<int>(v));
        }
        const auto leaves = tree.leaves();
        const int leaf = leaves[static_cast<std::size_t>(rng.uniform_index(leaves.size()))];
        const int var = avail_vars[static_cast<std::size_t>(rng.uniform_index(avail_vars.size()))];
        const auto& grid = cuts[static_cast<std::size_t>(var)];
        const int cut = static_cast<int>(rng.uniform_index(grid.size()));
        const double cut_value = grid[static_cast<std::size_t>(cut)];

        // per-leaf row counts (for grow legality of the proposed tree) and
        // the split statistics of the chosen leaf
        detail::LeafStats left, right, whole;
        int max_other_leaf = 0;
        std::vector<int> counts;
        for (int i = 0; i < n; ++i) {
            int slot = leaf_of_row[static_cast<std::size_t>(i)];
            if (slot >= static_cast<int>(counts.size())) counts.resize(static_cast<std::size_t>(slot) + 1, 0);
            ++counts[static_cast<std::size_t>(slot)];
            if (slot != leaf) continue;
            double r = residual[static_cast<std::size_t>(i)];
            whole.add(r);
            if (X(i, var) < cut_value) left.add(r);
            else right.add(r);
        }
        if (left.n < hyper.min_node_size || right.n < hyper.min_node_size) return;  // invalid proposal
        for (int l : leaves) {
            if (l == leaf || l >= static_cast<int>(counts.size())) continue;
            max_other_leaf = std::max(max_other_leaf, counts[static_cast<std::size_t>(l)]);
        }

        const int d = tree.depth(leaf);
        const double ps_d = detail::split_prob(alpha, beta, d);
        const double ps_d1 = detail::split_prob(alpha, beta, d + 1);
        const double log_prior = std::log(ps_d) + 2.0 * std::log1p(-ps_d1) - std::log1p(-ps_d);
        const double delta_ml =
              node_marginal_loglik(left.n, left.sum, left.sum2, sigma2, sigma_mu2)
            + node_marginal_loglik(right.n, right.sum, right.sum2, sigma2, sigma_mu2)
            - node_marginal_loglik(whole.n, whole.sum, whole.sum2, sigma2, sigma_mu2);

        // nog count after the grow: the grown leaf becomes a nog; its parent
        // stops being one if the sibling is a leaf
        int n_nogs_new = static_cast<int>(nogs.size()) + 1;
        const int parent = tree.node(leaf).parent;
        if (parent >= 0) {
            const auto& p = tree.node(parent);
            const int sib = (p.left == leaf) ? p.right : p.left;
            if (tree.node(sib).is_leaf()) --n_nogs_new;
        }
        const bool grow_ok_new =
            std::max({max_other_leaf, left.n, right.n}) >= 2 * hyper.min_node_size;
        const double p_prune_new = grow_ok_new ? 0.5 : 1.0;  // prune is always legal after a grow
        const double p_grow_old = detail::grow_prob(grow_ok, prune_ok);

        const double log_accept = log_prior + delta_ml
                                + std::log(p_prune_new) - std::log(static_cast<double>(n_nogs_new))
                                - std::log(p_grow_old) + std::log(static_cast<double>(leaves.size()));
        if (std::log(rng.uniform()) > log_accept) return;  // rejected

        const auto [lchild, rchild] = tree.grow(leaf, var, cut, cut_value);
        for (int i = 0; i < n; ++i) {
            auto& slot = leaf_of_row[static_cast<std::size_t>(i)];
            if (slot == leaf) slot = (X(i, var) < cut_value) ? lchild : rchild;
        }
        return;
    }

    // prune move
    const int nog = nogs[static_cast<std::size_t>(rng.uniform_index(nogs.size()))];
    const int lchild = tree.node(nog).left, rchild = tree.node(nog).right;

    detail::LeafStats left, right;
    for (int i = 0; i < n; ++i) {
        const int slot = leaf_of_row[static_cast<std::size_t>(i)];
        const double r = residual[static_cast<std::size_t>(i)];
        if (slot == lchild) left.add(r);
        else if (slot == rchild) right.add(r);
    }
    detail::LeafStats whole;
    whole.n = left.n + right.n;
    whole.sum = left.sum + right.sum;
    whole.sum2 = left.sum2 + right.sum2;

    const int d = tree.depth(nog);
    const double ps_d = detail::split_prob(alpha, beta, d);
    const double ps_d1 = detail::split_prob(alpha, beta, d + 1);
    const double log_prior = std::log(ps_d) + 2.0 * std::log1p(-ps_d1) - std::log1p(-ps_d);
    const double delta_ml =
          node_marginal_loglik(left.n, left.sum, left.sum2, sigma2, sigma_mu2)
        + node_marginal_loglik(right.n, right.sum, right.sum2, sigma2, sigma_mu2)
        - node_marginal_loglik(whole.n, whole.sum, whole.sum2, sigma2, sigma_mu2);

    // after the prune: the nog becomes a leaf holding both children's rows,
    // so grow is legal on the pruned tree; its parent may become a new nog
    int n_nogs_new = static_cast<int>(nogs.size()) - 1;
    const int parent = tree.node(nog).parent;
    if (parent >= 0) {
        const auto& p = tree.node(parent);
        const int sib = (p.left == nog) ? p.right : p.left;
        if (tree.node(sib).is_leaf()) ++n_nogs_new;
    }
    const bool prune_ok_new = n_nogs_new > 0;
    const double p_grow_new = detail::grow_prob(true, prune_ok_new);
    const int n_leaves_new = tree.leaf_count() - 1;
    const double p_prune_old = prune_ok ? (grow_ok ? 0.5 : 1.0) : 0.0;

    const double log_accept = -log_prior - delta_ml
                            + std::log(p_grow_new) - std::log(static_cast<double>(n_leaves_new))
                            - std::log(p_prune_old) + std::log(static_cast<double>(nogs.size()));
    if (std::log(rng.uniform()) > log_accept) return;  // rejected

    tree.prune(nog);
    for (int i = 0; i < n; ++i) {
        auto& slot = leaf_of_row[static_cast<std::size_t>(i)];
        if (slot == lchild || slot == rchild) slot = nog;
    }
}

// Conjugate leaf-mean refresh: mu | rest ~ N((S/sigma2)/P, 1/P) with
// P = n/sigma2 + 1/sigma_mu2.  A leaf with no rows draws from the prior.
inline void draw_leaf_means(Tree& tree, const std::vector<int>& leaf_of_row,
                            const std::vector<double>& residual, double sigma2, double sigma_mu2,
                            RngStream& rng) {
    const auto leaves = tree.leaves();
    std::vector<detail::LeafStats> stats(static_cast<std::size_t>(tree.arena_size()));
    for (std::size_t i = 0; i < leaf_of_row.size(); ++i) {
        stats[static_cast<std::size_t>(leaf_of_row[i])].add(residual[i]);
    }
    for (int leaf : leaves) {
        const auto& s = stats[static_cast<std::size_t>(leaf)];
        const double precision = s.n / sigma2 + 1.0 / sigma_mu2;
        const double mean = (s.sum / sigma2) / precision;
        tree.node(leaf).leaf_mean = rng.normal(mean, std::sqrt(1.0 / precision));
    }
}

inline SumOfTreesState init_state(const Vector& y, const Matrix& X, const BartHyper& hyper) {
    hyper.validate();
    if (y.size() == 0 || X.rows() == 0) throw std::invalid_argument("init_state: empty data");
    if (y.size() != X.rows()) throw std::invalid_argument("init_state: y and X row mismatch");
    if (y.size() < hyper.min_node_size) throw std::invalid_argument("init_state: fewer rows than min_node_size");

    SumOfTreesState st;
    st.offset_mu = y.mean();
    const double est = detail::calibration_variance(y, X);
    st.sigma2 = est;
    // lambda solves P(sigma^2 <= est) = q under nu*lambda/chi2_nu
    st.lambda = est * chi_square_quantile(1.0 - hyper.q, hyper.nu) / hyper.nu;
    double range = y.maxCoeff() - y.minCoeff();
    if (!(range > 0.0)) range = 1.0;
    const double sigma_mu = range / (2.0 * hyper.k * std::sqrt(static_cast<double>(hyper.m)));
    st.sigma_mu2 = sigma_mu * sigma_mu;

    const auto n = static_cast<std::size_t>(y.size());
    st.n_cols = X.cols();
    st.forest.assign(static_cast<std::size_t>(hyper.m), Tree{});
    st.leaf_of_row.assign(static_cast<std::size_t>(hyper.m), std::vector<int>(n, 0));
    st.fits.assign(static_cast<std::size_t>(hyper.m), std::vector<double>(n, 0.0));
    st.total_fit.assign(n, 0.0);
    return st;
}

// One full backfitting sweep: per tree, a structure move plus a leaf-mean
// refresh on the partial residuals, then the sigma^2 draw.
inline void gibbs_step(SumOfTreesState& st, const Vector& y, const Matrix& X,
                       const BartHyper& hyper, const Cutpoints& cuts, RngStream& rng) {
    const int n = static_cast<int>(y.size());
    std::vector<double> partial(static_cast<std::size_t>(n));
    for (std::size_t j = 0; j < st.forest.size(); ++j) {
        for (int i = 0; i < n; ++i) {
            partial[static_cast<std::size_t>(i)] =
                y(i) - st.offset_mu - (st.total_fit[static_cast<std::size_t>(i)] - st.fits[j][static_cast<std::size_t>(i)]);
        }
        propose_tree_move(st.forest[j], st.leaf_of_row[j], X, partial, st.sigma2, st.sigma_mu2, hyper, cuts, rng);
        draw_leaf_means(st.forest[j], st.leaf_of_row[j], partial, st.sigma2, st.sigma_mu2, rng);
        for (int i = 0; i < n; ++i) {
            const double g = st.forest[j].node(st.leaf_of_row[j][static_cast<std::size_t>(i)]).leaf_mean;
            st.total_fit[static_cast<std::size_t>(i)] += g - st.fits[j][static_cast<std::size_t>(i)];
            st.fits[j][static_cast<std::size_t>(i)] = g;
        }
    }
    // rebuild the running sum once per sweep so incremental FP error cannot
    // accumulate across sweeps
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < st.fits.size(); ++j) s += st.fits[j][static_cast<std::size_t>(i)];
        st.total_fit[static_cast<std::size_t>(i)] = s;
    }
    double rss = 0.0;
    for (int i = 0; i < n; ++i) {
        const double e = y(i) - st.offset_mu - st.total_fit[static_cast<std::size_t>(i)];
        rss += e * e;
    }
    st.sigma2 = (hyper.nu * st.lambda + rss) / rng.chi_square(hyper.nu + n);
}

// Sum-of-trees prediction (includes the fixed offset).  Trees are summed
// first so the result matches offset_mu + total_fit on training rows.
inline Vector predict(const std::vector<Tree>& forest, double offset_mu, const Matrix& X_new) {
    Vector out(X_new.rows());
    std::vector<double> row(static_cast<std::size_t>(X_new.cols()));
    for (Eigen::Index i = 0; i < X_new.rows(); ++i) {
        for (Eigen::Index j = 0; j < X_new.cols(); ++j) row[static_cast<std::size_t>(j)] = X_new(i, j);
        double s = 0.0;
        for (const auto& tree : forest) s += tree.evaluate(row);
        out(i) = offset_mu + s;
    }
    return out;
}

inline Vector predict(const SumOfTreesState& st, const Matrix& X_new) {
    if (X_new.cols() != st.n_cols) throw std::invalid_argument("predict: covariate count differs from training schema");
    return predict(st.forest, st.offset_mu, X_new);
}

} // namespace survdtr
