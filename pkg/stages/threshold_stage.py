"""
D.I.S.C.O. Stage #5: Thresholds
eta, delta, beta*, sigma, eps and theta of the leave-the-neighbourhood estimates.
"""

from typing import Any, Dict

from core.errors import DomainError
from core.turnpike import beta_star, eta_from_continuity, sigma_eps_theta, stay_sigma
from stages.base_stage import BaseStage


class ThresholdStage(BaseStage):
    """Computes every threshold quantity from the accepted certificate."""

    def __init__(self, verbose: bool = True):
        super().__init__(stage_name="thresholds", label="Thresh", verbose=verbose)

    def _execute(self, context: Dict[str, Any]) -> Dict[str, Any]:
        config = context["config"]
        eq = context["equilibrium"]
        region = context["region"]
        report = context["dissipativity"]
        problem = context["problem"]

        if config.rho is not None:
            rho = config.rho
            rho_source = "--rho"
        else:
            rho = 0.5 * region.inner_radius(eq.x)
            rho_source = "half the distance from x_l to the region boundary"
        if rho <= 0:
            raise DomainError("the equilibrium sits on the region boundary; pass --rho or --region")
        if rho > region.inner_radius(eq.x) + 1e-12:
            self.log_warning(f"rho={rho:g} reaches past the dissipativity region")

        eta = eta_from_continuity(context["system"], eq, rho)
        alpha = report.alpha_fit
        delta = float(alpha(eta))
        ell_min = min(report.ell_tilde_min, 0.0)
        k = config.k_fraction
        b_star = beta_star(delta, ell_min, k)
        limit = delta / (delta - ell_min)
        sigma, eps, theta = sigma_eps_theta(problem.beta, config.K, delta, context["gamma"], k)
        theta_one = stay_sigma(problem.beta, 1, delta, k) / 2.0
        self.log_result(f"eta={eta:.6g}, delta={delta:.6g}, beta*={b_star:.6g} (k={k}), sigma={sigma:.6g}")
        return {
            "thresholds": {
                "rho": rho,
                "eta": eta,
                "delta": delta,
                "ell_tilde_min": ell_min,
                "k_fraction": k,
                "beta_star": b_star,
                "beta_star_half": beta_star(delta, ell_min, 1),
                "beta_star_limit": limit,
                "K": config.K,
                "sigma": sigma,
                "eps_stay": eps,
                "theta_stay": theta,
                "theta_one": theta_one,
            },
            "provenance": {
                "rho": f"{rho:g} ({rho_source})",
                "eta": "largest rho/2^j passing the continuity probe",
                "delta": f"alpha_fit(eta), {report.variant.value} deviation",
                "beta_star": f"k/(k+1) delta/(delta - ell_tilde_min) with k={k}",
                "sigma": "beta^K delta / ((k+1)(1-beta))",
                "eps_stay": "gamma^-1(sigma/2)",
                "theta_one": "sigma(beta, 1)/2 for the local turnpike constants",
            },
        }
