"""
Token-only scaling law for retrained 2:4 models
===============================================

Fits L(D) = A + B * D**-beta (L = ln perplexity, D in billions of tokens,
beta fixed) to the bundled retraining tables, checks the fit by holding out
the largest run, and asks how many tokens each model would need to match
its dense perplexity.
"""
import numpy as np

from castlab.scalinglaw import (BUNDLED, bundled_points, fit_token_law, leave_one_out,
                                predict_perplexity, tokens_to_match)

# dense perplexities the retraining is trying to recover
DENSE = {"2-7b": 5.12, "2-13b": 4.57, "3-8b": 5.76}

for name in BUNDLED:
    pts = bundled_points(name)
    fit = fit_token_law(pts)
    print(f"--- {name}")
    print(fit.report(), end="")

    # the curve against the measurements
    d = np.array([p.tokens for p in pts])
    ppl = np.exp([p.loss for p in pts])
    for di, pi, qi in zip(d, ppl, predict_perplexity(fit, d)):
        print(f"  D={di:5.1f}B  measured {pi:.2f}  fitted {qi:.3f}")

    # refit without the 40B point and predict it
    (h,) = leave_one_out(pts)
    print(f"  held out {h.tokens:g}B: predicted {h.predicted_ppl:.3f}, error {h.abs_error:.3f}")

    # extrapolation is sensitive to rounding in A and B, so read it as an order of magnitude
    print(f"  tokens to reach dense ppl {DENSE[name]}: {tokens_to_match(fit, DENSE[name]):.1f}B")
