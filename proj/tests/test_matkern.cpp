#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "crvkit/matkern.hpp"

using namespace crvkit;

namespace {

MatrixXd random_sym(int n, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  MatrixXd a(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = nd(gen);
  return 0.5 * (a + a.transpose());
}

// PSD matrix with the given rank: Q diag(positive, zeros) Q'.
MatrixXd random_psd(int n, int rank, unsigned seed) {
  std::mt19937 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  MatrixXd g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = nd(gen);
  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ();
  VectorXd d = VectorXd::Zero(n);
  std::uniform_real_distribution<double> ud(0.5, 3.0);
  for (int i = 0; i < rank; ++i) d(i) = ud(gen);
  return q * d.asDiagonal() * q.transpose();
}

double simpson(const std::function<double(double)>& f, double a, double b) {
  return (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
}

double adaptive_simpson(const std::function<double(double)>& f, double a, double b, double tol,
                        double whole, int depth) {
  const double m = 0.5 * (a + b);
  const double left = simpson(f, a, m), right = simpson(f, m, b);
  if (depth > 40) return left + right;
  if (std::fabs(left + right - whole) < 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson(f, a, m, 0.5 * tol, left, depth + 1) +
         adaptive_simpson(f, m, b, 0.5 * tol, right, depth + 1);
}

double integrate(const std::function<double(double)>& f, double a, double b, double tol) {
  return adaptive_simpson(f, a, b, tol, simpson(f, a, b), 0);
}

// Quadrature oracle for the regularized incomplete beta, independent of the
// continued-fraction implementation. Substituting t = u^2 removes the
// endpoint singularity at 0 for a >= 1/2; the x > 1/2 case flips to keep the
// integration away from the other endpoint.
double ibeta_quad(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  if (x > 0.5) return 1.0 - ibeta_quad(b, a, 1.0 - x);
  const double lnB = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  auto g = [&](double u) {
    return 2.0 * std::exp((2.0 * a - 1.0) * std::log(u) + (b - 1.0) * std::log1p(-u * u) - lnB);
  };
  // u^(2a-1) at u=0: finite for a >= 1/2 (limit 2/exp(lnB) at a = 1/2).
  auto g0 = [&](double u) { return u > 0.0 ? g(u) : (a == 0.5 ? 2.0 * std::exp(-lnB) : 0.0); };
  return integrate(g0, 0.0, std::sqrt(x), 1e-12);
}

double f_sf_quad(double x, double d1, double d2) {
  return ibeta_quad(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * x));
}

}  // namespace

TEST_CASE("SymMatrix symmetrizes and validates") {
  MatrixXd a(2, 2);
  a << 1.0, 2.0, 0.0, 3.0;
  SymMatrix s(a);
  CHECK(s(0, 1) == Catch::Approx(1.0));
  CHECK(s(1, 0) == Catch::Approx(1.0));
  CHECK_THROWS_AS(SymMatrix(MatrixXd::Zero(2, 3)), Error);
  MatrixXd bad = MatrixXd::Zero(2, 2);
  bad(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(SymMatrix(bad), Error);
}

TEST_CASE("sym_eigen basic spectra") {
  SECTION("identity") {
    EigenPair ep = sym_eigen(SymMatrix(MatrixXd::Identity(3, 3)));
    for (int i = 0; i < 3; ++i) CHECK(ep.values(i) == Catch::Approx(1.0).margin(1e-14));
  }
  SECTION("diagonal sorts descending") {
    VectorXd d(3);
    d << 3.0, 1.0, 2.0;
    EigenPair ep = sym_eigen(SymMatrix(MatrixXd(d.asDiagonal())));
    CHECK(ep.values(0) == Catch::Approx(3.0));
    CHECK(ep.values(1) == Catch::Approx(2.0));
    CHECK(ep.values(2) == Catch::Approx(1.0));
  }
  SECTION("reconstruction and orthogonality") {
    for (unsigned seed : {1u, 2u, 3u, 4u, 5u}) {
      MatrixXd a = random_sym(5, seed);
      EigenPair ep = sym_eigen(SymMatrix(a));
      MatrixXd rec = ep.vectors * ep.values.asDiagonal() * ep.vectors.transpose();
      CHECK((rec - a).cwiseAbs().maxCoeff() < 1e-12);
      MatrixXd vtv = ep.vectors.transpose() * ep.vectors;
      CHECK((vtv - MatrixXd::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-12);
      for (int i = 0; i + 1 < 5; ++i) CHECK(ep.values(i) >= ep.values(i + 1));
    }
  }
}

TEST_CASE("pinv_sqrt_psd closed forms") {
  SECTION("identity maps to itself") {
    SymMatrix r = pinv_sqrt_psd(SymMatrix(MatrixXd::Identity(4, 4)));
    CHECK((r.mat() - MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("rank-deficient diagonal") {
    VectorXd d(2);
    d << 4.0, 0.0;
    SymMatrix r = pinv_sqrt_psd(SymMatrix(MatrixXd(d.asDiagonal())));
    CHECK(r(0, 0) == Catch::Approx(0.5).margin(1e-14));
    CHECK(r(1, 1) == Catch::Approx(0.0).margin(1e-14));
    CHECK(r(0, 1) == Catch::Approx(0.0).margin(1e-14));
  }
  SECTION("orthogonal projection is its own pinv sqrt") {
    // P projects onto span{(1,1)/sqrt(2)}: eigenvalues 1 and 0.
    MatrixXd p(2, 2);
    p << 0.5, 0.5, 0.5, 0.5;
    SymMatrix r = pinv_sqrt_psd(SymMatrix(p));
    CHECK((r.mat() - p).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("indefinite input rejected") {
    VectorXd d(2);
    d << 1.0, -1.0;
    CHECK_THROWS_AS(pinv_sqrt_psd(SymMatrix(MatrixXd(d.asDiagonal()))), Error);
    try {
      pinv_sqrt_psd(SymMatrix(MatrixXd(d.asDiagonal())));
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::NotPSD);
    }
  }
}

TEST_CASE("pinv_sqrt_psd satisfies the Penrose conditions") {
  for (unsigned seed = 1; seed <= 20; ++seed) {
    const int n = 6;
    const int rank = 2 + static_cast<int>(seed % 4);
    MatrixXd a = random_psd(n, rank, seed);
    SymMatrix s = pinv_sqrt_psd(SymMatrix(a));
    MatrixXd b = s.mat() * s.mat();  // candidate Moore-Penrose inverse of a
    const double scale = a.cwiseAbs().maxCoeff();
    CHECK((a * b * a - a).cwiseAbs().maxCoeff() < 1e-10 * scale);
    CHECK((b * a * b - b).cwiseAbs().maxCoeff() < 1e-10 * std::max(1.0, b.cwiseAbs().maxCoeff()));
    CHECK(((a * b) - (a * b).transpose()).cwiseAbs().maxCoeff() < 1e-10);
    CHECK(((b * a) - (b * a).transpose()).cwiseAbs().maxCoeff() < 1e-10);
    // s itself is the pinv of the psd sqrt: s * sqrt(a) is the range projector
    MatrixXd proj = s.mat() * sqrt_psd(SymMatrix(a)).mat();
    CHECK((proj * a - a).cwiseAbs().maxCoeff() < 1e-9 * scale);
  }
}

TEST_CASE("sqrt_psd squares back") {
  for (unsigned seed = 31; seed <= 36; ++seed) {
    MatrixXd a = random_psd(5, 3, seed);
    SymMatrix r = sqrt_psd(SymMatrix(a));
    CHECK((r.mat() * r.mat() - a).cwiseAbs().maxCoeff() < 1e-11);
  }
}

TEST_CASE("chol_upper factorization") {
  SECTION("worked 2x2 example") {
    MatrixXd a(2, 2);
    a << 4.0, 2.0, 2.0, 2.0;
    MatrixXd d = chol_upper(SymMatrix(a));
    CHECK(d(0, 0) == Catch::Approx(2.0).margin(1e-14));
    CHECK(d(0, 1) == Catch::Approx(1.0).margin(1e-14));
    CHECK(d(1, 0) == Catch::Approx(0.0).margin(1e-14));
    CHECK(d(1, 1) == Catch::Approx(1.0).margin(1e-14));
    CHECK((d.transpose() * d - a).cwiseAbs().maxCoeff() < 1e-14);
  }
  SECTION("compound symmetry round trip") {
    MatrixXd phi = MatrixXd::Constant(3, 3, 0.5);
    phi.diagonal().setConstant(1.0);
    MatrixXd d = chol_upper(SymMatrix(phi));
    CHECK((d.transpose() * d - phi).cwiseAbs().maxCoeff() < 1e-14);
    CHECK(std::fabs(d(1, 0)) + std::fabs(d(2, 0)) + std::fabs(d(2, 1)) < 1e-14);
  }
  SECTION("singular input rejected") {
    MatrixXd a = MatrixXd::Ones(2, 2);
    CHECK_THROWS_AS(chol_upper(SymMatrix(a)), Error);
  }
}

TEST_CASE("f_sf closed-form anchors") {
  CHECK(f_sf(0.0, 3.0, 7.0) == Catch::Approx(1.0));
  // F(1,1) and F(2,2) both have median 1.
  CHECK(f_sf(1.0, 1.0, 1.0) == Catch::Approx(0.5).margin(1e-12));
  CHECK(f_sf(1.0, 2.0, 2.0) == Catch::Approx(0.5).margin(1e-12));
  // F(2, d2): P(F > x) = (1 + 2x/d2)^(-d2/2) exactly.
  for (double x : {0.3, 1.0, 2.5, 7.0}) {
    for (double d2 : {1.0, 4.0, 11.0}) {
      CHECK(f_sf(x, 2.0, d2) == Catch::Approx(std::pow(1.0 + 2.0 * x / d2, -0.5 * d2)).epsilon(1e-11));
    }
  }
  CHECK_THROWS_AS(f_sf(-1.0, 2.0, 2.0), Error);
  CHECK_THROWS_AS(f_sf(1.0, 0.0, 2.0), Error);
}

TEST_CASE("f_sf monotone decreasing in the statistic") {
  for (double d1 : {1.0, 3.0, 6.0}) {
    for (double d2 : {2.0, 9.5, 40.0}) {
      double prev = 1.0;
      for (double x = 0.1; x < 12.0; x += 0.37) {
        const double p = f_sf(x, d1, d2);
        CHECK(p < prev);
        CHECK(p > 0.0);
        prev = p;
      }
    }
  }
}

TEST_CASE("f_sf agrees with quadrature") {
  for (double d1 : {1.0, 2.0, 3.0, 6.0}) {
    for (double d2 : {1.0, 5.0, 14.0, 49.0}) {
      for (double x : {0.05, 0.4, 1.0, 2.3, 5.0, 11.0}) {
        CHECK(f_sf(x, d1, d2) == Catch::Approx(f_sf_quad(x, d1, d2)).margin(1e-8));
      }
    }
  }
}

TEST_CASE("chi2_sf closed forms and quadrature") {
  // k = 2 is exponential: P(X > x) = exp(-x/2).
  for (double x : {0.1, 1.0, 5.991464547107979, 12.0}) {
    CHECK(chi2_sf(x, 2.0) == Catch::Approx(std::exp(-0.5 * x)).epsilon(1e-12));
  }
  CHECK(chi2_sf(5.991464547107979, 2.0) == Catch::Approx(0.05).epsilon(1e-10));
  // k = 1: P(X > x) = erfc(sqrt(x/2)).
  for (double x : {0.2, 1.0, 3.841458820694124}) {
    CHECK(chi2_sf(x, 1.0) == Catch::Approx(std::erfc(std::sqrt(0.5 * x))).epsilon(1e-11));
  }
  CHECK(chi2_sf(3.841458820694124, 1.0) == Catch::Approx(0.05).epsilon(1e-10));
  // k = 4: P(X > x) = (1 + x/2) exp(-x/2).
  for (double x : {0.5, 2.0, 9.487729036781154}) {
    CHECK(chi2_sf(x, 4.0) == Catch::Approx((1.0 + 0.5 * x) * std::exp(-0.5 * x)).epsilon(1e-11));
  }
  CHECK(chi2_sf(0.0, 3.0) == Catch::Approx(1.0));
  CHECK_THROWS_AS(chi2_sf(-0.5, 2.0), Error);
}

TEST_CASE("t two-sided tail matches t-density quadrature") {
  for (double df : {1.0, 4.0, 14.0, 29.0}) {
    for (double t : {0.4, 1.3, 2.1, 4.5}) {
      const double lnC = std::lgamma(0.5 * (df + 1.0)) - std::lgamma(0.5 * df) -
                         0.5 * std::log(df * M_PI);
      auto dens = [&](double u) {
        return std::exp(lnC - 0.5 * (df + 1.0) * std::log1p(u * u / df));
      };
      // integrate the central mass and complement; integrand is smooth
      const double central = integrate(dens, -t, t, 1e-12);
      CHECK(t_two_sided(t, df) == Catch::Approx(1.0 - central).margin(1e-9));
      CHECK(t_two_sided(t, df) == Catch::Approx(f_sf(t * t, 1.0, df)).margin(1e-15));
    }
  }
}
