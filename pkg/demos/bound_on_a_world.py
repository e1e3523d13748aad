"""Compute both leakage bounds on synthetic worlds and try to break them.

    python demos/bound_on_a_world.py

The data bound is evaluated under each kappa convention on 1-D worlds, where
the attacker closest to the bound (the Bayes-optimal regressor) is known.
Takes about two minutes on one core.
"""

from collections import Counter

from splitmi.guarantees import (
    GaussianLabelWorld,
    LinearGaussianDataWorld,
    KAPPA_CONVENTIONS,
    compute_data_bound,
    compute_prediction_bound,
    fit_aux_classifier,
    fit_linear_generator,
    verify_data_bound,
    verify_prediction_bound,
)


def main():
    # a short aux fit; an overconfident q(y|z) makes the all-pairs vCLUB loose
    world = GaussianLabelWorld.random(1)
    z, y = world.sample(4000)
    bound = compute_prediction_bound(world, fit_aux_classifier(z, y, world.num_classes, steps=100), z, y)
    print(f"prediction world: C={world.num_classes}  I(z;y)~{world.mutual_information():.3f}")
    print(f"  epsilon {bound.epsilon:.3f} = vCLUB {bound.i_vclub:.3f} + KL {bound.kl_term:.3f}")
    print(f"  no attacker may reach cross-entropy below {bound.ce_lower_bound:.3f} (random guess {bound.ce_random:.3f})")
    for rec in verify_prediction_bound(world, bound, z, y):
        print(f"  {rec.attacker:<6} cross-entropy {rec.details['attacker_ce']:.3f}  holds={rec.holds}")

    failures, slack = Counter(), {}
    for seed in range(30):
        world = LinearGaussianDataWorld.random(seed, q_dim=1)
        r, x = world.sample(1000)
        gen = fit_linear_generator(r, x)
        for conv in KAPPA_CONVENTIONS:
            records = verify_data_bound(world, compute_data_bound(world, gen, r, x, conv), r, x)
            failures[conv] += not all(rec.holds for rec in records)
            for rec in records:
                if rec.attacker == "oracle":
                    slack[conv] = min(slack.get(conv, float("inf")), rec.margin)
    print("data bound over 30 one-dimensional worlds:")
    for conv in KAPPA_CONVENTIONS:
        print(f"  kappa {conv:<12} worlds broken {failures[conv]:>2}  smallest oracle margin {slack[conv]:+.3f}")


if __name__ == "__main__":
    main()
