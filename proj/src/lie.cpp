#include "icreg/lie.hpp"

#include <cmath>
#include <mutex>
#include <stdexcept>

namespace icreg::lie {

namespace {

void require_finite(const Tensor& t, const char* what) {
    for (double v : t.values())
        if (!std::isfinite(v)) throw std::domain_error(std::string(what) + ": non-finite entries");
}

Tensor eye(std::size_t n) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return Tensor::constant({n, n}, std::move(v));
}

// Flattens [..., D] to [N, D].
Tensor as_points(const Tensor& t, std::size_t dim) {
    if (t.rank() < 1 || t.shape().back() != dim)
        throw ad::ShapeError("transform: points must have trailing extent " + std::to_string(dim) + ", got " +
                             ad::shape_to_string(t.shape()));
    if (t.rank() == 2) return t;
    return ad::reshape(t, {t.size() / dim, dim});
}

Tensor entry(const Tensor& m, std::size_t i, std::size_t j) {
    return ad::reshape(ad::slice(ad::slice(m, 0, i, 1), 1, j, 1), {1});
}

Tensor apply_homogeneous(const Tensor& m, const Tensor& pts) {
    const std::size_t n = pts.shape()[0], d = pts.shape()[1];
    Tensor ones = Tensor::full({n, 1}, 1.0);
    Tensor parts[] = {pts, ones};
    Tensor aug = ad::concat(parts, 1);
    return ad::slice(ad::matmul(aug, ad::transpose(m)), 1, 0, d);
}

}  // namespace

// ---------------------------------------------------------------------------
// Algebra

AlgebraElement::AlgebraElement(Variant v, std::size_t dim) : value_(std::move(v)), dim_(dim) {}

AlgebraElement AlgebraElement::matrix(Tensor m) {
    if (m.rank() != 2 || m.shape()[0] != m.shape()[1] || m.shape()[0] < 2)
        throw ad::ShapeError("HomMatrix: expected square (D+1)x(D+1), got " + ad::shape_to_string(m.shape()));
    const std::size_t dim = m.shape()[0] - 1;
    return AlgebraElement(HomMatrix{std::move(m)}, dim);
}

AlgebraElement AlgebraElement::grid(Tensor field) {
    if (field.rank() != 3 || field.shape()[2] != 2)
        throw ad::ShapeError("VelocityGrid: expected [H,W,2], got " + ad::shape_to_string(field.shape()));
    return AlgebraElement(VelocityGrid{std::move(field)}, 2);
}

AlgebraElement AlgebraElement::mlp(VelocityMlp v, std::size_t dim) {
    for (const auto& term : v.terms) {
        if (term.layers.empty()) throw ad::ShapeError("VelocityMlp: term without layers");
        std::size_t in = dim;
        for (const auto& l : term.layers) {
            if (l.rank() != 2 || l.shape()[1] != in + 1)
                throw ad::ShapeError("VelocityMlp: layer " + ad::shape_to_string(l.shape()) + " does not accept " +
                                     std::to_string(in) + " inputs");
            in = l.shape()[0];
        }
        if (in != dim) throw ad::ShapeError("VelocityMlp: output width must equal dim");
    }
    return AlgebraElement(std::move(v), dim);
}

AlgebraElement AlgebraElement::scaled(double s) const {
    if (s == 1.0) return *this;
    return std::visit(
        [&](const auto& g) -> AlgebraElement {
            using T = std::decay_t<decltype(g)>;
            if constexpr (std::is_same_v<T, HomMatrix>) {
                return AlgebraElement(HomMatrix{ad::scalar_mul(g.matrix, s)}, dim_);
            } else if constexpr (std::is_same_v<T, VelocityGrid>) {
                return AlgebraElement(VelocityGrid{ad::scalar_mul(g.field, s)}, dim_);
            } else {
                VelocityMlp out = g;
                for (auto& t : out.terms) t.coefficient *= s;
                return AlgebraElement(std::move(out), dim_);
            }
        },
        value_);
}

// ---------------------------------------------------------------------------
// Exponentials

Tensor mat_exp(const Tensor& m) {
    if (m.rank() != 2 || m.shape()[0] != m.shape()[1])
        throw ad::ShapeError("mat_exp: expected a square matrix, got " + ad::shape_to_string(m.shape()));
    require_finite(m, "mat_exp");
    const std::size_t n = m.shape()[0];
    double norm1 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        double col = 0.0;
        for (std::size_t i = 0; i < n; ++i) col += std::abs(m[i * n + j]);
        norm1 = std::max(norm1, col);
    }
    int squarings = 0;
    while (norm1 / std::ldexp(1.0, squarings) > 0.5) ++squarings;

    const Tensor id = eye(n);
    const Tensor a = squarings ? ad::scalar_mul(m, std::ldexp(1.0, -squarings)) : m;
    Tensor r = id;
    for (int k = 18; k >= 1; --k) r = ad::add(id, ad::scalar_mul(ad::matmul(a, r), 1.0 / k));
    for (int i = 0; i < squarings; ++i) r = ad::matmul(r, r);
    return r;
}

Tensor identity_grid(std::size_t height, std::size_t width) {
    std::vector<double> v(height * width * 2);
    for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j) {
            v[(i * width + j) * 2] = (static_cast<double>(j) + 0.5) / static_cast<double>(width);
            v[(i * width + j) * 2 + 1] = (static_cast<double>(i) + 0.5) / static_cast<double>(height);
        }
    return Tensor::constant({height, width, 2}, std::move(v));
}

namespace {

// Displacement field of exp(v) on v's own grid.
Tensor svf_displacement(const Tensor& velocity, int squaring_steps) {
    if (squaring_steps < 1) throw std::invalid_argument("svf_exp: squaring_steps must be >= 1");
    if (velocity.rank() != 3 || velocity.shape()[2] != 2)
        throw ad::ShapeError("svf_exp: expected [H,W,2], got " + ad::shape_to_string(velocity.shape()));
    require_finite(velocity, "svf_exp");
    const Tensor id = identity_grid(velocity.shape()[0], velocity.shape()[1]);
    Tensor disp = ad::scalar_mul(velocity, std::ldexp(1.0, -squaring_steps));
    for (int k = 0; k < squaring_steps; ++k) disp = ad::add(disp, ad::grid_sample(disp, ad::add(id, disp)));
    return disp;
}

}  // namespace

Tensor svf_exp(const Tensor& velocity, int squaring_steps) {
    Tensor disp = svf_displacement(velocity, squaring_steps);
    return ad::add(identity_grid(velocity.shape()[0], velocity.shape()[1]), disp);
}

Tensor eval_mlp(const VelocityMlp& velocity, const Tensor& points) {
    if (points.rank() != 2) throw ad::ShapeError("eval_mlp: points must be [N,D]");
    const std::size_t n = points.shape()[0];
    const Tensor ones = Tensor::full({n, 1}, 1.0);
    Tensor total;
    for (const auto& term : velocity.terms) {
        Tensor h = points;
        for (std::size_t l = 0; l < term.layers.size(); ++l) {
            Tensor parts[] = {h, ones};
            h = ad::matmul(ad::concat(parts, 1), ad::transpose(term.layers[l]));
            if (l + 1 < term.layers.size()) h = ad::tanh(h);
        }
        if (term.coefficient != 1.0) h = ad::scalar_mul(h, term.coefficient);
        total = total.defined() ? ad::add(total, h) : h;
    }
    if (!total.defined()) return Tensor::zeros(points.shape());
    return total;
}

Tensor rk4_flow(const VelocityMlp& velocity, int steps, const Tensor& points) {
    if (steps < 1) throw std::invalid_argument("rk4_flow: steps must be >= 1");
    const double dt = 1.0 / steps;
    auto v = [&](const Tensor& z) {
        Tensor out = eval_mlp(velocity, z);
        require_finite(out, "rk4_flow velocity");
        return out;
    };
    Tensor z = points;
    for (int s = 0; s < steps; ++s) {
        Tensor k1 = v(z);
        Tensor k2 = v(ad::add(z, ad::scalar_mul(k1, 0.5 * dt)));
        Tensor k3 = v(ad::add(z, ad::scalar_mul(k2, 0.5 * dt)));
        Tensor k4 = v(ad::add(z, ad::scalar_mul(k3, dt)));
        Tensor incr = ad::add(ad::add(k1, k4), ad::scalar_mul(ad::add(k2, k3), 2.0));
        z = ad::add(z, ad::scalar_mul(incr, dt / 6.0));
    }
    return z;
}

// ---------------------------------------------------------------------------
// Transforms

struct Transform::Impl {
    enum class Kind { exponential, direct, composite };
    Kind kind = Kind::composite;
    std::size_t dim = 2;
    std::optional<AlgebraElement> algebra;
    double scale = 1.0;
    ExpSettings settings;
    Tensor direct;
    std::vector<Transform> parts;  // composite: parts[0](parts[1](...(x)))

    // Lazily evaluated exponential (matrix, or displacement grid).
    mutable std::once_flag once;
    mutable Tensor cached;

    const Tensor& exponential_value() const {
        std::call_once(once, [this] {
            AlgebraElement g = algebra->scaled(scale);
            if (auto* m = std::get_if<HomMatrix>(&g.value()))
                cached = mat_exp(m->matrix);
            else if (auto* v = std::get_if<VelocityGrid>(&g.value()))
                cached = svf_displacement(v->field, settings.squaring_steps);
        });
        return cached;
    }
};

Transform Transform::exponential(AlgebraElement g, double scale, ExpSettings settings) {
    if (!std::isfinite(scale)) throw std::invalid_argument("exponentiate: scale must be finite");
    auto impl = std::make_shared<Impl>();
    impl->kind = Impl::Kind::exponential;
    impl->dim = g.dim();
    impl->algebra = std::move(g);
    impl->scale = scale;
    impl->settings = settings;
    return Transform(std::move(impl));
}

Transform Transform::direct_matrix(Tensor m) {
    if (m.rank() != 2 || m.shape()[0] != m.shape()[1] || m.shape()[0] < 2)
        throw ad::ShapeError("direct_matrix: expected (D+1)x(D+1), got " + ad::shape_to_string(m.shape()));
    auto impl = std::make_shared<Impl>();
    impl->kind = Impl::Kind::direct;
    impl->dim = m.shape()[0] - 1;
    impl->direct = std::move(m);
    return Transform(std::move(impl));
}

Transform Transform::identity(std::size_t dim) {
    auto impl = std::make_shared<Impl>();
    impl->kind = Impl::Kind::composite;
    impl->dim = dim;
    return Transform(std::move(impl));
}

std::size_t Transform::dim() const { return impl_->dim; }

bool Transform::can_scale_algebra() const { return impl_->kind == Impl::Kind::exponential; }

bool Transform::has_square_root() const {
    return impl_->kind == Impl::Kind::exponential || (impl_->kind == Impl::Kind::direct && impl_->dim == 2);
}

bool Transform::is_identity() const { return impl_->kind == Impl::Kind::composite && impl_->parts.empty(); }

const AlgebraElement* Transform::algebra() const { return impl_->algebra ? &*impl_->algebra : nullptr; }

double Transform::algebra_scale() const { return impl_->scale; }

Transform Transform::scaled(double factor) const {
    if (!can_scale_algebra()) throw std::logic_error("transform has no algebra element to scale");
    return exponential(*impl_->algebra, impl_->scale * factor, impl_->settings);
}

Transform Transform::square_root() const {
    if (impl_->kind == Impl::Kind::exponential) return scaled(0.5);
    if (impl_->kind != Impl::Kind::direct || impl_->dim != 2)
        throw std::logic_error("transform has no explicit square root");
    // Principal root of [[A, t], [0, 1]]: R = (A + sqrt(det A) I) / sqrt(tr A + 2 sqrt(det A)),
    // u = (R + I)^-1 t. NaN when A has no real principal root.
    const Tensor& m = impl_->direct;
    Tensor a = entry(m, 0, 0), b = entry(m, 0, 1), c = entry(m, 1, 0), d = entry(m, 1, 1);
    Tensor tx = entry(m, 0, 2), ty = entry(m, 1, 2);
    Tensor s = ad::sqrt(ad::sub(ad::mul(a, d), ad::mul(b, c)));
    Tensor tau = ad::sqrt(ad::add(ad::add(a, d), ad::scalar_mul(s, 2.0)));
    Tensor ra = ad::div(ad::add(a, s), tau), rb = ad::div(b, tau);
    Tensor rc = ad::div(c, tau), rd = ad::div(ad::add(d, s), tau);
    Tensor pa = ad::add_scalar(ra, 1.0), pd = ad::add_scalar(rd, 1.0);
    Tensor det = ad::sub(ad::mul(pa, pd), ad::mul(rb, rc));
    Tensor ux = ad::div(ad::sub(ad::mul(pd, tx), ad::mul(rb, ty)), det);
    Tensor uy = ad::div(ad::sub(ad::mul(pa, ty), ad::mul(rc, tx)), det);
    Tensor zero = Tensor::scalar(0.0), one = Tensor::scalar(1.0);
    Tensor parts[] = {ra, rb, ux, rc, rd, uy, zero, zero, one};
    return direct_matrix(ad::reshape(ad::concat(parts, 0), {3, 3}));
}

Tensor Transform::apply(const Tensor& points) const {
    const Impl& t = *impl_;
    Tensor pts = as_points(points, t.dim);
    Tensor out;
    switch (t.kind) {
        case Impl::Kind::composite: {
            out = pts;
            for (auto it = t.parts.rbegin(); it != t.parts.rend(); ++it) out = it->apply(out);
            break;
        }
        case Impl::Kind::direct:
            out = apply_homogeneous(t.direct, pts);
            break;
        case Impl::Kind::exponential: {
            const auto& g = t.algebra->value();
            if (std::holds_alternative<HomMatrix>(g)) {
                out = apply_homogeneous(t.exponential_value(), pts);
            } else if (std::holds_alternative<VelocityGrid>(g)) {
                out = ad::add(pts, ad::grid_sample(t.exponential_value(), pts));
            } else {
                AlgebraElement scaled = t.algebra->scaled(t.scale);
                out = rk4_flow(std::get<VelocityMlp>(scaled.value()), t.settings.rk4_steps, pts);
            }
            break;
        }
    }
    if (points.rank() == 2) return out;
    return ad::reshape(out, points.shape());
}

Tensor Transform::position_field(std::size_t height, std::size_t width) const {
    return apply(identity_grid(height, width));
}

Transform compose(const Transform& first, const Transform& second) {
    if (first.dim() != second.dim())
        throw std::invalid_argument("compose: dimension mismatch " + std::to_string(first.dim()) + " vs " +
                                    std::to_string(second.dim()));
    auto impl = std::make_shared<Transform::Impl>();
    impl->kind = Transform::Impl::Kind::composite;
    impl->dim = first.dim();
    for (const Transform* t : {&first, &second}) {
        if (t->is_identity()) continue;
        if (t->impl_->kind == Transform::Impl::Kind::composite)
            impl->parts.insert(impl->parts.end(), t->impl_->parts.begin(), t->impl_->parts.end());
        else
            impl->parts.push_back(*t);
    }
    return Transform(std::move(impl));
}

Tensor warp_image(const Tensor& image, const Transform& transform) {
    if (image.rank() != 2) throw ad::ShapeError("warp_image: expected [H,W], got " + ad::shape_to_string(image.shape()));
    if (transform.is_identity()) return image;
    return ad::grid_sample(image, transform.position_field(image.shape()[0], image.shape()[1]));
}

}  // namespace icreg::lie
