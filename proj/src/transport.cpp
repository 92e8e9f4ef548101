#include "iwd/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace iwd::transport {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kMassEps = 1e-14;

void check_weights(std::span<const double> a, std::span<const double> b, int n, int m) {
    if (static_cast<int>(a.size()) != n || static_cast<int>(b.size()) != m)
        throw ValidationError("weights do not match cost matrix shape");
    double sa = 0.0, sb = 0.0;
    for (double v : a) {
        if (v < 0.0) throw ValidationError("source weights must be nonnegative");
        sa += v;
    }
    for (double v : b) {
        if (v < 0.0) throw ValidationError("target weights must be nonnegative");
        sb += v;
    }
    if (std::abs(sa - 1.0) > 1e-9 || std::abs(sb - 1.0) > 1e-9 || std::abs(sa - sb) > 1e-9)
        throw ValidationError("weights must each sum to 1 (got " + std::to_string(sa) + " and " +
                              std::to_string(sb) + ")");
}

bool is_uniform(std::span<const double> w) {
    const double u = 1.0 / static_cast<double>(w.size());
    for (double v : w)
        if (std::abs(v - u) > 1e-12) return false;
    return true;
}

} // namespace

double CostMatrix::max() const {
    double mx = 0.0;
    for (double v : values) mx = std::max(mx, v);
    return mx;
}

CostMatrix ground_cost(const PatchDistribution& p, const PatchDistribution& q) {
    if (p.atom_dim != q.atom_dim)
        throw ValidationError("ground_cost: atom dimensions differ (" + std::to_string(p.atom_dim) +
                              " vs " + std::to_string(q.atom_dim) + ")");
    CostMatrix c;
    c.n = p.count();
    c.m = q.count();
    c.values.resize(static_cast<std::size_t>(c.n) * c.m);
    for (int i = 0; i < c.n; ++i) {
        const auto& u = p.atoms[static_cast<std::size_t>(i)];
        for (int j = 0; j < c.m; ++j) {
            const auto& v = q.atoms[static_cast<std::size_t>(j)];
            double s = 0.0;
            for (int d = 0; d < p.atom_dim; ++d) s += std::abs(u[d] - v[d]);
            c.at(i, j) = s;
        }
    }
    return c;
}

double TransportPlan::cost_against(const CostMatrix& c) const {
    if (c.n != n || c.m != m) throw ValidationError("plan/cost shape mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < coupling.size(); ++k) s += coupling[k] * c.values[k];
    return s;
}

double TransportPlan::marginal_error() const {
    double err = 0.0;
    for (int i = 0; i < n; ++i) {
        double r = 0.0;
        for (int j = 0; j < m; ++j) r += at(i, j);
        err = std::max(err, std::abs(r - source_weights[static_cast<std::size_t>(i)]));
    }
    for (int j = 0; j < m; ++j) {
        double col = 0.0;
        for (int i = 0; i < n; ++i) col += at(i, j);
        err = std::max(err, std::abs(col - target_weights[static_cast<std::size_t>(j)]));
    }
    return err;
}

const char* solver_name(SolverKind k) {
    switch (k) {
        case SolverKind::exact: return "exact";
        case SolverKind::sinkhorn: return "sinkhorn";
        case SolverKind::dual: return "dual";
        case SolverKind::brute: return "brute";
    }
    return "unknown";
}

std::string to_json(const IwdValue& v) {
    std::ostringstream os;
    os.precision(17);
    os << "{\"solver\":\"" << solver_name(v.solver) << "\",\"value\":" << v.value
       << ",\"n\":" << v.n << ",\"m\":" << v.m << ",\"marginal_error\":" << v.marginal_error
       << ",\"iterations\":" << v.iterations << "}";
    return os.str();
}

std::vector<double> uniform_weights(int n) {
    return std::vector<double>(static_cast<std::size_t>(n), 1.0 / static_cast<double>(n));
}

namespace {

// Kuhn-Munkres with potentials, O(n^3). Returns row -> column.
std::vector<int> hungarian(const CostMatrix& cost) {
    const int n = cost.n;
    std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0),
        v(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<std::size_t>(n) + 1, kInf);
        std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
        do {
            used[static_cast<std::size_t>(j0)] = 1;
            const int i0 = p[static_cast<std::size_t>(j0)];
            int j1 = 0;
            double delta = kInf;
            for (int j = 1; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) continue;
                const double cur = cost.at(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                                   v[static_cast<std::size_t>(j)];
                if (cur < minv[static_cast<std::size_t>(j)]) {
                    minv[static_cast<std::size_t>(j)] = cur;
                    way[static_cast<std::size_t>(j)] = j0;
                }
                if (minv[static_cast<std::size_t>(j)] < delta) {
                    delta = minv[static_cast<std::size_t>(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[static_cast<std::size_t>(j)]) {
                    u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
                    v[static_cast<std::size_t>(j)] -= delta;
                } else {
                    minv[static_cast<std::size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[static_cast<std::size_t>(j0)] != 0);
        do {
            const int j1 = way[static_cast<std::size_t>(j0)];
            p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> rowsol(static_cast<std::size_t>(n), -1);
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<std::size_t>(j)] > 0)
            rowsol[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
    return rowsol;
}

// Successive shortest paths with potentials on the dense bipartite graph.
struct McfResult {
    std::vector<double> flow; // n x m
    double cost = 0.0;
};

McfResult transport_mcf(const CostMatrix& c, std::span<const double> a,
                        std::span<const double> b) {
    const int n = c.n, m = c.m, V = n + m;
    std::vector<double> rs(a.begin(), a.end());
    std::vector<double> rd(b.begin(), b.end());
    // balance exactly so the loop can drain all mass
    const double sa = std::accumulate(rs.begin(), rs.end(), 0.0);
    const double sb = std::accumulate(rd.begin(), rd.end(), 0.0);
    if (sb > 0.0) {
        const double scale = sa / sb;
        for (double& v : rd) v *= scale;
    }

    McfResult res;
    res.flow.assign(static_cast<std::size_t>(n) * m, 0.0);
    std::vector<double> pi(static_cast<std::size_t>(V), 0.0);
    std::vector<double> dist(static_cast<std::size_t>(V));
    std::vector<int> parent(static_cast<std::size_t>(V));
    std::vector<char> done(static_cast<std::size_t>(V));

    double remaining = sa;
    const int max_rounds = 10 * (V + 1);
    int rounds = 0;
    while (remaining > 1e-12) {
        if (++rounds > max_rounds)
            throw NumericError("transport_mcf: augmentation limit exceeded");
        std::fill(dist.begin(), dist.end(), kInf);
        std::fill(parent.begin(), parent.end(), -1);
        std::fill(done.begin(), done.end(), 0);
        for (int i = 0; i < n; ++i)
            if (rs[static_cast<std::size_t>(i)] > kMassEps) dist[static_cast<std::size_t>(i)] = 0.0;

        // O(V^2) Dijkstra over reduced costs
        for (int it = 0; it < V; ++it) {
            int u = -1;
            double best = kInf;
            for (int v = 0; v < V; ++v)
                if (!done[static_cast<std::size_t>(v)] && dist[static_cast<std::size_t>(v)] < best) {
                    best = dist[static_cast<std::size_t>(v)];
                    u = v;
                }
            if (u < 0) break;
            done[static_cast<std::size_t>(u)] = 1;
            if (u < n) {
                for (int j = 0; j < m; ++j) {
                    const double rc = std::max(
                        0.0, c.at(u, j) + pi[static_cast<std::size_t>(u)] -
                                 pi[static_cast<std::size_t>(n + j)]);
                    const double nd = dist[static_cast<std::size_t>(u)] + rc;
                    if (nd < dist[static_cast<std::size_t>(n + j)]) {
                        dist[static_cast<std::size_t>(n + j)] = nd;
                        parent[static_cast<std::size_t>(n + j)] = u;
                    }
                }
            } else {
                const int j = u - n;
                for (int i = 0; i < n; ++i) {
                    if (res.flow[static_cast<std::size_t>(i) * m + j] <= kMassEps) continue;
                    const double rc = std::max(
                        0.0, -c.at(i, j) + pi[static_cast<std::size_t>(n + j)] -
                                 pi[static_cast<std::size_t>(i)]);
                    const double nd = dist[static_cast<std::size_t>(u)] + rc;
                    if (nd < dist[static_cast<std::size_t>(i)]) {
                        dist[static_cast<std::size_t>(i)] = nd;
                        parent[static_cast<std::size_t>(i)] = u;
                    }
                }
            }
        }

        int target = -1;
        double best = kInf;
        for (int j = 0; j < m; ++j)
            if (rd[static_cast<std::size_t>(j)] > kMassEps &&
                dist[static_cast<std::size_t>(n + j)] < best) {
                best = dist[static_cast<std::size_t>(n + j)];
                target = n + j;
            }
        if (target < 0) throw NumericError("transport_mcf: no augmenting path");

        for (int v = 0; v < V; ++v)
            if (dist[static_cast<std::size_t>(v)] < kInf)
                pi[static_cast<std::size_t>(v)] +=
                    std::min(dist[static_cast<std::size_t>(v)], best);

        // walk back to a source, collecting the bottleneck
        double delta = rd[static_cast<std::size_t>(target - n)];
        int v = target;
        while (parent[static_cast<std::size_t>(v)] >= 0) {
            const int u = parent[static_cast<std::size_t>(v)];
            if (u >= n && v < n) // backward arc: limited by existing flow
                delta = std::min(delta, res.flow[static_cast<std::size_t>(v) * m + (u - n)]);
            v = u;
        }
        delta = std::min(delta, rs[static_cast<std::size_t>(v)]);

        int w = target;
        while (parent[static_cast<std::size_t>(w)] >= 0) {
            const int u = parent[static_cast<std::size_t>(w)];
            if (u < n) // forward source -> sink
                res.flow[static_cast<std::size_t>(u) * m + (w - n)] += delta;
            else // backward sink -> source
                res.flow[static_cast<std::size_t>(w) * m + (u - n)] -= delta;
            w = u;
        }
        rs[static_cast<std::size_t>(v)] -= delta;
        rd[static_cast<std::size_t>(target - n)] -= delta;
        if (rs[static_cast<std::size_t>(v)] < kMassEps) rs[static_cast<std::size_t>(v)] = 0.0;
        if (rd[static_cast<std::size_t>(target - n)] < kMassEps)
            rd[static_cast<std::size_t>(target - n)] = 0.0;
        remaining -= delta;
    }

    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) res.cost += res.flow[static_cast<std::size_t>(i) * m + j] * c.at(i, j);
    return res;
}

TransportPlan plan_from_flow(const CostMatrix& c, std::span<const double> a,
                             std::span<const double> b, std::vector<double> flow) {
    TransportPlan plan;
    plan.n = c.n;
    plan.m = c.m;
    plan.coupling = std::move(flow);
    plan.source_weights.assign(a.begin(), a.end());
    plan.target_weights.assign(b.begin(), b.end());
    return plan;
}

} // namespace

IwdValue exact_w1(const CostMatrix& cost, std::span<const double> a, std::span<const double> b) {
    check_weights(a, b, cost.n, cost.m);
    IwdValue out;
    out.solver = SolverKind::exact;
    out.n = cost.n;
    out.m = cost.m;

    if (cost.n == cost.m && is_uniform(a) && is_uniform(b)) {
        const auto rowsol = hungarian(cost);
        const double w = 1.0 / static_cast<double>(cost.n);
        std::vector<double> flow(static_cast<std::size_t>(cost.n) * cost.m, 0.0);
        double total = 0.0;
        for (int i = 0; i < cost.n; ++i) {
            flow[static_cast<std::size_t>(i) * cost.m + rowsol[static_cast<std::size_t>(i)]] = w;
            total += w * cost.at(i, rowsol[static_cast<std::size_t>(i)]);
        }
        out.value = total;
        out.plan = plan_from_flow(cost, a, b, std::move(flow));
        return out;
    }

    auto mcf = transport_mcf(cost, a, b);
    out.value = mcf.cost;
    out.plan = plan_from_flow(cost, a, b, std::move(mcf.flow));
    return out;
}

IwdValue brute_force_w1(const CostMatrix& cost) {
    if (cost.n != cost.m)
        throw ValidationError("brute_force_w1: cost matrix must be square");
    if (cost.n > 8)
        throw ValidationError("brute_force_w1: N must be <= 8, got " + std::to_string(cost.n));
    const int n = cost.n;
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best = perm;
    double best_cost = kInf;
    do {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += cost.at(i, perm[static_cast<std::size_t>(i)]);
        if (s < best_cost) {
            best_cost = s;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));

    IwdValue out;
    out.solver = SolverKind::brute;
    out.n = n;
    out.m = n;
    out.value = best_cost / static_cast<double>(n);
    const double w = 1.0 / static_cast<double>(n);
    std::vector<double> flow(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) flow[static_cast<std::size_t>(i) * n + best[static_cast<std::size_t>(i)]] = w;
    out.plan = plan_from_flow(cost, uniform_weights(n), uniform_weights(n), std::move(flow));
    return out;
}

void SinkhornConfig::validate() const {
    if (tolerance <= 0.0) throw ValidationError("sinkhorn: tolerance must be > 0");
    if (max_iterations < 1) throw ValidationError("sinkhorn: max_iterations must be >= 1");
}

double SinkhornConfig::resolve_epsilon(const CostMatrix& cost) const {
    return epsilon > 0.0 ? epsilon : 0.05 * cost.max();
}

namespace {

double lse(std::span<const double> s) {
    double mx = -kInf;
    for (double v : s) mx = std::max(mx, v);
    if (mx == -kInf) return -kInf;
    double sum = 0.0;
    for (double v : s) sum += std::exp(v - mx);
    return mx + std::log(sum);
}

struct Marginals {
    double err_a_l1 = 0.0;
    double err_b_l1 = 0.0;
};

Marginals plan_marginal_l1(const std::vector<double>& P, int n, int m, std::span<const double> a,
                           std::span<const double> b) {
    Marginals e;
    for (int i = 0; i < n; ++i) {
        double r = 0.0;
        for (int j = 0; j < m; ++j) r += P[static_cast<std::size_t>(i) * m + j];
        e.err_a_l1 += std::abs(r - a[static_cast<std::size_t>(i)]);
    }
    for (int j = 0; j < m; ++j) {
        double col = 0.0;
        for (int i = 0; i < n; ++i) col += P[static_cast<std::size_t>(i) * m + j];
        e.err_b_l1 += std::abs(col - b[static_cast<std::size_t>(j)]);
    }
    return e;
}

// Rounds a nearly feasible plan onto the transport polytope (scale rows,
// scale columns, then spread the leftover mass rank-one).
void round_to_feasible(std::vector<double>& P, int n, int m, std::span<const double> a,
                       std::span<const double> b) {
    for (int i = 0; i < n; ++i) {
        double r = 0.0;
        for (int j = 0; j < m; ++j) r += P[static_cast<std::size_t>(i) * m + j];
        const double x = r > 0.0 ? std::min(1.0, a[static_cast<std::size_t>(i)] / r) : 0.0;
        for (int j = 0; j < m; ++j) P[static_cast<std::size_t>(i) * m + j] *= x;
    }
    std::vector<double> col(static_cast<std::size_t>(m), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) col[static_cast<std::size_t>(j)] += P[static_cast<std::size_t>(i) * m + j];
    for (int j = 0; j < m; ++j) {
        const double y = col[static_cast<std::size_t>(j)] > 0.0
                             ? std::min(1.0, b[static_cast<std::size_t>(j)] / col[static_cast<std::size_t>(j)])
                             : 0.0;
        for (int i = 0; i < n; ++i) P[static_cast<std::size_t>(i) * m + j] *= y;
    }
    std::vector<double> ea(static_cast<std::size_t>(n), 0.0), eb(static_cast<std::size_t>(m), 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double r = 0.0;
        for (int j = 0; j < m; ++j) r += P[static_cast<std::size_t>(i) * m + j];
        ea[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i)] - r;
        total += ea[static_cast<std::size_t>(i)];
    }
    for (int j = 0; j < m; ++j) {
        double c = 0.0;
        for (int i = 0; i < n; ++i) c += P[static_cast<std::size_t>(i) * m + j];
        eb[static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j)] - c;
    }
    if (total > 0.0)
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                P[static_cast<std::size_t>(i) * m + j] +=
                    ea[static_cast<std::size_t>(i)] * eb[static_cast<std::size_t>(j)] / total;
}

} // namespace

IwdValue sinkhorn_w1(const CostMatrix& cost, std::span<const double> a, std::span<const double> b,
                     const SinkhornConfig& cfg) {
    check_weights(a, b, cost.n, cost.m);
    cfg.validate();
    const int n = cost.n, m = cost.m;

    IwdValue out;
    out.solver = SolverKind::sinkhorn;
    out.n = n;
    out.m = m;

    const double max_cost = cost.max();
    if (max_cost <= 0.0) { // all atoms identical; any feasible plan is optimal
        std::vector<double> P(static_cast<std::size_t>(n) * m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j)
                P[static_cast<std::size_t>(i) * m + j] =
                    a[static_cast<std::size_t>(i)] * b[static_cast<std::size_t>(j)];
        out.value = 0.0;
        out.plan = plan_from_flow(cost, a, b, std::move(P));
        return out;
    }
    const double eps = cfg.resolve_epsilon(cost);

    std::vector<double> P(static_cast<std::size_t>(n) * m, 0.0);
    double err = kInf;
    int iters = 0;

    if (cfg.log_domain) {
        std::vector<double> alpha(static_cast<std::size_t>(n), 0.0),
            beta(static_cast<std::size_t>(m), 0.0);
        std::vector<double> row(static_cast<std::size_t>(m)), colbuf(static_cast<std::size_t>(n));
        for (iters = 1; iters <= cfg.max_iterations; ++iters) {
            for (int i = 0; i < n; ++i) {
                for (int j = 0; j < m; ++j)
                    row[static_cast<std::size_t>(j)] = (beta[static_cast<std::size_t>(j)] - cost.at(i, j)) / eps;
                alpha[static_cast<std::size_t>(i)] =
                    eps * std::log(a[static_cast<std::size_t>(i)]) - eps * lse(row);
            }
            for (int j = 0; j < m; ++j) {
                for (int i = 0; i < n; ++i)
                    colbuf[static_cast<std::size_t>(i)] = (alpha[static_cast<std::size_t>(i)] - cost.at(i, j)) / eps;
                beta[static_cast<std::size_t>(j)] =
                    eps * std::log(b[static_cast<std::size_t>(j)]) - eps * lse(colbuf);
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    P[static_cast<std::size_t>(i) * m + j] = std::exp(
                        (alpha[static_cast<std::size_t>(i)] + beta[static_cast<std::size_t>(j)] -
                         cost.at(i, j)) /
                        eps);
            const auto e = plan_marginal_l1(P, n, m, a, b);
            err = std::max(e.err_a_l1, e.err_b_l1);
            if (err <= cfg.tolerance) break;
        }
    } else {
        std::vector<double> K(static_cast<std::size_t>(n) * m);
        for (std::size_t k = 0; k < K.size(); ++k) K[k] = std::exp(-cost.values[k] / eps);
        std::vector<double> u(static_cast<std::size_t>(n), 1.0), v(static_cast<std::size_t>(m), 1.0);
        for (iters = 1; iters <= cfg.max_iterations; ++iters) {
            for (int i = 0; i < n; ++i) {
                double s = 0.0;
                for (int j = 0; j < m; ++j) s += K[static_cast<std::size_t>(i) * m + j] * v[static_cast<std::size_t>(j)];
                if (s <= 0.0 || !std::isfinite(s))
                    throw NumericError("sinkhorn: scaling underflow; use the log-domain solver");
                u[static_cast<std::size_t>(i)] = a[static_cast<std::size_t>(i)] / s;
            }
            for (int j = 0; j < m; ++j) {
                double s = 0.0;
                for (int i = 0; i < n; ++i) s += K[static_cast<std::size_t>(i) * m + j] * u[static_cast<std::size_t>(i)];
                if (s <= 0.0 || !std::isfinite(s))
                    throw NumericError("sinkhorn: scaling underflow; use the log-domain solver");
                v[static_cast<std::size_t>(j)] = b[static_cast<std::size_t>(j)] / s;
            }
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j)
                    P[static_cast<std::size_t>(i) * m + j] =
                        u[static_cast<std::size_t>(i)] * K[static_cast<std::size_t>(i) * m + j] *
                        v[static_cast<std::size_t>(j)];
            const auto e = plan_marginal_l1(P, n, m, a, b);
            err = std::max(e.err_a_l1, e.err_b_l1);
            if (err <= cfg.tolerance) break;
        }
    }

    if (err > cfg.tolerance)
        throw ConvergenceError("sinkhorn: marginal error " + std::to_string(err) +
                                   " above tolerance after " + std::to_string(cfg.max_iterations) +
                                   " iterations",
                               err, cfg.max_iterations);

    out.iterations = std::min(iters, cfg.max_iterations);
    out.marginal_error = err;
    round_to_feasible(P, n, m, a, b);
    out.plan = plan_from_flow(cost, a, b, std::move(P));
    out.value = out.plan->cost_against(cost);
    return out;
}

UnrolledSinkhorn sinkhorn_unrolled_grad(const CostMatrix& cost, std::span<const double> a,
                                        std::span<const double> b, double epsilon,
                                        int iterations) {
    check_weights(a, b, cost.n, cost.m);
    if (epsilon <= 0.0) throw ValidationError("sinkhorn_unrolled_grad: epsilon must be > 0");
    if (iterations < 1) throw ValidationError("sinkhorn_unrolled_grad: iterations must be >= 1");
    const int n = cost.n, m = cost.m, T = iterations;

    // Simultaneous (Jacobi) updates: both potentials advance from the previous
    // iterate. This keeps the computation symmetric under swapping the two
    // sides, so on a symmetric cost the gradient cancellations are exact.
    std::vector<std::vector<double>> alphas(static_cast<std::size_t>(T) + 1),
        betas(static_cast<std::size_t>(T) + 1);
    alphas[0].assign(static_cast<std::size_t>(n), 0.0);
    betas[0].assign(static_cast<std::size_t>(m), 0.0);
    std::vector<double> buf(static_cast<std::size_t>(std::max(n, m)));
    for (int t = 1; t <= T; ++t) {
        const auto& ap = alphas[static_cast<std::size_t>(t) - 1];
        const auto& bp = betas[static_cast<std::size_t>(t) - 1];
        auto& al = alphas[static_cast<std::size_t>(t)];
        auto& be = betas[static_cast<std::size_t>(t)];
        al.assign(static_cast<std::size_t>(n), 0.0);
        be.assign(static_cast<std::size_t>(m), 0.0);
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < m; ++j)
                buf[static_cast<std::size_t>(j)] = (bp[static_cast<std::size_t>(j)] - cost.at(i, j)) / epsilon;
            al[static_cast<std::size_t>(i)] = epsilon * std::log(a[static_cast<std::size_t>(i)]) -
                                              epsilon * lse({buf.data(), static_cast<std::size_t>(m)});
        }
        for (int j = 0; j < m; ++j) {
            for (int i = 0; i < n; ++i)
                buf[static_cast<std::size_t>(i)] = (ap[static_cast<std::size_t>(i)] - cost.at(i, j)) / epsilon;
            be[static_cast<std::size_t>(j)] = epsilon * std::log(b[static_cast<std::size_t>(j)]) -
                                              epsilon * lse({buf.data(), static_cast<std::size_t>(n)});
        }
    }

    const auto& alT = alphas[static_cast<std::size_t>(T)];
    const auto& beT = betas[static_cast<std::size_t>(T)];
    std::vector<double> P(static_cast<std::size_t>(n) * m);
    UnrolledSinkhorn out;
    out.cost_grad.assign(static_cast<std::size_t>(n) * m, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            const double p = std::exp(
                (alT[static_cast<std::size_t>(i)] + beT[static_cast<std::size_t>(j)] - cost.at(i, j)) / epsilon);
            P[static_cast<std::size_t>(i) * m + j] = p;
            out.value += p * cost.at(i, j);
        }

    std::vector<double> abar(static_cast<std::size_t>(n), 0.0), bbar(static_cast<std::size_t>(m), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) {
            const double pc = P[static_cast<std::size_t>(i) * m + j] * cost.at(i, j) / epsilon;
            abar[static_cast<std::size_t>(i)] += pc;
            bbar[static_cast<std::size_t>(j)] += pc;
            out.cost_grad[static_cast<std::size_t>(i) * m + j] +=
                P[static_cast<std::size_t>(i) * m + j] * (1.0 - cost.at(i, j) / epsilon);
        }

    // Reverse sweep. sf: row softmax of (beta^{t-1} - C)/eps feeding alpha^t;
    // sg: column softmax of (alpha^{t-1} - C)/eps feeding beta^t. Each cell
    // receives both contributions as one fused increment, which keeps the
    // accumulated cost gradient exactly symmetric on symmetric inputs.
    std::vector<double> sf(static_cast<std::size_t>(n) * m), sg(static_cast<std::size_t>(n) * m);
    for (int t = T; t >= 1; --t) {
        const auto& ap = alphas[static_cast<std::size_t>(t) - 1];
        const auto& bp = betas[static_cast<std::size_t>(t) - 1];
        for (int i = 0; i < n; ++i) {
            double mx = -kInf;
            for (int j = 0; j < m; ++j)
                mx = std::max(mx, bp[static_cast<std::size_t>(j)] - cost.at(i, j));
            double sum = 0.0;
            for (int j = 0; j < m; ++j) {
                const double e = std::exp((bp[static_cast<std::size_t>(j)] - cost.at(i, j) - mx) / epsilon);
                sf[static_cast<std::size_t>(i) * m + j] = e;
                sum += e;
            }
            for (int j = 0; j < m; ++j) sf[static_cast<std::size_t>(i) * m + j] /= sum;
        }
        for (int j = 0; j < m; ++j) {
            double mx = -kInf;
            for (int i = 0; i < n; ++i)
                mx = std::max(mx, ap[static_cast<std::size_t>(i)] - cost.at(i, j));
            double sum = 0.0;
            for (int i = 0; i < n; ++i) {
                const double e = std::exp((ap[static_cast<std::size_t>(i)] - cost.at(i, j) - mx) / epsilon);
                sg[static_cast<std::size_t>(i) * m + j] = e;
                sum += e;
            }
            for (int i = 0; i < n; ++i) sg[static_cast<std::size_t>(i) * m + j] /= sum;
        }

        std::vector<double> abar_prev(static_cast<std::size_t>(n), 0.0),
            bbar_prev(static_cast<std::size_t>(m), 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) {
                const double cf = abar[static_cast<std::size_t>(i)] * sf[static_cast<std::size_t>(i) * m + j];
                const double cg = bbar[static_cast<std::size_t>(j)] * sg[static_cast<std::size_t>(i) * m + j];
                out.cost_grad[static_cast<std::size_t>(i) * m + j] += cf + cg;
                bbar_prev[static_cast<std::size_t>(j)] -= cf;
                abar_prev[static_cast<std::size_t>(i)] -= cg;
            }
        abar = std::move(abar_prev);
        bbar = std::move(bbar_prev);
    }
    return out;
}

void CriticState::validate() const {
    spec.validate();
    if (spec.output != diffcore::OutputKind::scalar || spec.output_width() != 1)
        throw ValidationError("critic: output must be scalar");
    if (!(penalty_weight > 0.0) || !std::isfinite(penalty_weight))
        throw ValidationError("critic: penalty weight must be finite and > 0");
    if (inner_steps < 1) throw ValidationError("critic: inner steps must be >= 1");
}

CriticState make_critic(int atom_dim, std::uint64_t seed, double penalty_weight, int inner_steps) {
    CriticState c;
    c.spec.layer_widths = {atom_dim, 64, 64, 1};
    c.spec.activation = diffcore::Activation::tanh;
    c.spec.output = diffcore::OutputKind::scalar;
    c.params = diffcore::init_params(c.spec, seed);
    c.penalty_weight = penalty_weight;
    c.inner_steps = inner_steps;
    c.validate();
    return c;
}

double gradient_penalty(const CriticState& critic, const PatchDistribution& real,
                        const PatchDistribution& fake, std::span<const double> rhos) {
    critic.validate();
    if (real.count() != fake.count() || real.atom_dim != fake.atom_dim)
        throw ValidationError("gradient_penalty: distributions are not aligned");
    if (static_cast<int>(rhos.size()) != real.count())
        throw ValidationError("gradient_penalty: need one rho per atom");
    const int n = real.count();
    const int dim = real.atom_dim;
    std::vector<double> mix(static_cast<std::size_t>(dim));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double rho = rhos[static_cast<std::size_t>(i)];
        if (!(rho >= 0.0 && rho <= 1.0))
            throw ValidationError("gradient_penalty: rho outside [0,1]");
        for (int d = 0; d < dim; ++d)
            mix[static_cast<std::size_t>(d)] =
                rho * real.atoms[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] +
                (1.0 - rho) * fake.atoms[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
        const auto g = diffcore::input_gradient(critic.spec, critic.params, mix);
        double norm2 = 0.0;
        for (double v : g) norm2 += v * v;
        const double norm = std::sqrt(norm2);
        total += (norm - 1.0) * (norm - 1.0);
    }
    return total / static_cast<double>(n);
}

CriticObjective critic_objective_grad(const CriticState& critic,
                                      std::span<const CriticPair> pairs, rng::Rng& gen) {
    critic.validate();
    if (pairs.empty()) throw ValidationError("critic_objective_grad: no distribution pairs");
    CriticObjective obj;
    obj.ascent_grad.assign(critic.params.values.size(), 0.0);
    const double pair_w = 1.0 / static_cast<double>(pairs.size());
    std::vector<double> mix;

    for (const auto& pr : pairs) {
        const auto& mu = *pr.real;
        const auto& nu = *pr.fake;
        if (mu.count() != nu.count() || mu.atom_dim != nu.atom_dim)
            throw ValidationError("critic_objective_grad: pair is not aligned");
        const int n = mu.count();
        const double atom_w = pair_w / static_cast<double>(n);
        mix.resize(static_cast<std::size_t>(mu.atom_dim));

        for (int i = 0; i < n; ++i) {
            const auto bu = diffcore::backward(critic.spec, critic.params,
                                               mu.atoms[static_cast<std::size_t>(i)],
                                               diffcore::OutputWeightHead{{1.0}});
            obj.difference += atom_w * bu.loss;
            for (std::size_t k = 0; k < bu.param_grad.size(); ++k)
                obj.ascent_grad[k] += atom_w * bu.param_grad[k];

            const auto bv = diffcore::backward(critic.spec, critic.params,
                                               nu.atoms[static_cast<std::size_t>(i)],
                                               diffcore::OutputWeightHead{{1.0}});
            obj.difference -= atom_w * bv.loss;
            for (std::size_t k = 0; k < bv.param_grad.size(); ++k)
                obj.ascent_grad[k] -= atom_w * bv.param_grad[k];

            const double rho = gen.uniform01();
            for (int d = 0; d < mu.atom_dim; ++d)
                mix[static_cast<std::size_t>(d)] =
                    rho * mu.atoms[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)] +
                    (1.0 - rho) * nu.atoms[static_cast<std::size_t>(i)][static_cast<std::size_t>(d)];
            const auto pen = diffcore::grad_norm_penalty(critic.spec, critic.params, mix);
            obj.penalty += atom_w * pen.value;
            for (std::size_t k = 0; k < pen.param_grad.size(); ++k)
                obj.ascent_grad[k] -= critic.penalty_weight * atom_w * pen.param_grad[k];
        }
    }
    return obj;
}

namespace {

double mean_difference(const CriticState& critic, const PatchDistribution& mu,
                       const PatchDistribution& nu) {
    double diff = 0.0;
    for (int i = 0; i < mu.count(); ++i)
        diff += diffcore::scalar_value(critic.spec, critic.params,
                                       mu.atoms[static_cast<std::size_t>(i)]);
    for (int i = 0; i < nu.count(); ++i)
        diff -= diffcore::scalar_value(critic.spec, critic.params,
                                       nu.atoms[static_cast<std::size_t>(i)]);
    return diff / static_cast<double>(mu.count());
}

} // namespace

double dual_estimate(CriticState& critic, const PatchDistribution& mu,
                     const PatchDistribution& nu, const DualOptions& opts) {
    critic.validate();
    if (mu.count() != nu.count() || mu.atom_dim != nu.atom_dim)
        throw ValidationError("dual_estimate: distributions are not aligned");
    CriticState working = critic;
    working.penalty_weight = opts.lambda;

    auto optimizer = diffcore::make_optimizer(opts.optimizer, working.params.values.size());
    rng::Rng gen(opts.seed);
    const CriticPair pair{&mu, &nu};
    std::vector<double> descent(working.params.values.size());
    for (int step = 0; step < opts.steps; ++step) {
        const auto obj = critic_objective_grad(working, {&pair, 1}, gen);
        if (!std::isfinite(obj.difference) || !std::isfinite(obj.penalty))
            throw NumericError("dual_estimate: objective diverged at step " + std::to_string(step));
        for (std::size_t k = 0; k < descent.size(); ++k) descent[k] = -obj.ascent_grad[k];
        diffcore::optimizer_step(optimizer, working.params, descent);
    }
    // -f witnesses the same gap as f, and which orientation training picks is
    // an initialization artifact, so report the magnitude
    const double estimate = std::abs(mean_difference(working, mu, nu));
    if (!std::isfinite(estimate)) throw NumericError("dual_estimate: non-finite estimate");
    critic = working;
    return estimate;
}

double critic_dual_estimate(const Image& x, const Image& xt, const PatchGrid& grid,
                            CriticState& critic, const DualOptions& opts) {
    const auto mu = patchdist::extract_patches(x, grid);
    const auto nu = patchdist::extract_patches(xt, grid);
    return dual_estimate(critic, mu, nu, opts);
}

IwdValue iwd(const Image& x, const Image& xt, const PatchGrid& grid, const IwdOptions& opts) {
    if (x.height != xt.height || x.width != xt.width || x.channels != xt.channels)
        throw ValidationError("iwd: images must share geometry");
    const auto p = patchdist::extract_patches(x, grid);
    const auto q = patchdist::extract_patches(xt, grid);
    const auto cost = ground_cost(p, q);
    const auto a = uniform_weights(cost.n);
    const auto b = uniform_weights(cost.m);
    switch (opts.solver) {
        case SolverKind::exact: return exact_w1(cost, a, b);
        case SolverKind::brute: return brute_force_w1(cost);
        case SolverKind::sinkhorn: return sinkhorn_w1(cost, a, b, opts.sinkhorn);
        case SolverKind::dual: {
            auto critic = make_critic(p.atom_dim, opts.dual.seed, opts.dual.lambda);
            IwdValue v;
            v.solver = SolverKind::dual;
            v.n = cost.n;
            v.m = cost.m;
            v.iterations = opts.dual.steps;
            v.value = std::max(0.0, dual_estimate(critic, p, q, opts.dual));
            return v;
        }
    }
    throw ValidationError("iwd: unknown solver");
}

double multiscale_iwd(const Image& x, const Image& xt, std::span<const int> kernels,
                      std::span<const double> weights, const IwdOptions& opts) {
    if (kernels.empty() || kernels.size() != weights.size())
        throw ValidationError("multiscale_iwd: kernels and weights must align and be nonempty");
    double wsum = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ValidationError("multiscale_iwd: weights must be nonnegative");
        wsum += w;
    }
    if (std::abs(wsum - 1.0) > 1e-9)
        throw ValidationError("multiscale_iwd: weights must sum to 1");
    double total = 0.0;
    for (std::size_t s = 0; s < kernels.size(); ++s) {
        if (x.height % kernels[s] != 0 || x.width % kernels[s] != 0)
            throw ValidationError("multiscale_iwd: kernel " + std::to_string(kernels[s]) +
                                  " does not divide image " + std::to_string(x.height) + "x" +
                                  std::to_string(x.width));
        total += weights[s] * iwd(x, xt, PatchGrid::non_overlapping(kernels[s]), opts).value;
    }
    return total;
}

double global_pixel_w1(const Image& x, const Image& xt) {
    x.validate();
    xt.validate();
    if (x.channels != 1 || xt.channels != 1)
        throw ValidationError("global_pixel_w1: grayscale images only");
    if (x.height != xt.height || x.width != xt.width)
        throw ValidationError("global_pixel_w1: images must share geometry");

    double mass_x = 0.0, mass_y = 0.0;
    for (double v : x.pixels) mass_x += v;
    for (double v : xt.pixels) mass_y += v;
    if (mass_x <= 0.0 || mass_y <= 0.0)
        throw ValidationError("global_pixel_w1: image has zero total intensity");

    struct Pix {
        int y;
        int x;
        double w;
    };
    std::vector<Pix> src, dst;
    for (int py = 0; py < x.height; ++py)
        for (int px = 0; px < x.width; ++px) {
            const double vx = x.at(py, px, 0);
            if (vx > 0.0) src.push_back({py, px, vx / mass_x});
            const double vy = xt.at(py, px, 0);
            if (vy > 0.0) dst.push_back({py, px, vy / mass_y});
        }

    CostMatrix c;
    c.n = static_cast<int>(src.size());
    c.m = static_cast<int>(dst.size());
    c.values.resize(static_cast<std::size_t>(c.n) * c.m);
    for (int i = 0; i < c.n; ++i)
        for (int j = 0; j < c.m; ++j)
            c.at(i, j) = std::abs(src[static_cast<std::size_t>(i)].y - dst[static_cast<std::size_t>(j)].y) +
                         std::abs(src[static_cast<std::size_t>(i)].x - dst[static_cast<std::size_t>(j)].x);

    std::vector<double> a(static_cast<std::size_t>(c.n)), b(static_cast<std::size_t>(c.m));
    for (int i = 0; i < c.n; ++i) a[static_cast<std::size_t>(i)] = src[static_cast<std::size_t>(i)].w;
    for (int j = 0; j < c.m; ++j) b[static_cast<std::size_t>(j)] = dst[static_cast<std::size_t>(j)].w;
    return transport_mcf(c, a, b).cost;
}

} // namespace iwd::transport
