"""The exact one-sided binomial test used to grade identity accuracy.

    python demos/05_statistics.py
"""
from cife.evaluation import binomial_pvalue

chance = 1 / 8
print("samples  correct  accuracy  p-value")
for n, s in [(64, 8), (64, 13), (64, 16), (128, 16), (128, 27), (128, 40)]:
    print(f"{n:7d}  {s:7d}  {s / n:8.3f}  {binomial_pvalue(s, n, chance):.3g}")

# Smallest number of hits that clears p < 0.01 at 128 samples.
need = next(s for s in range(129) if binomial_pvalue(s, 128, chance) < 0.01)
print(f"128 samples need {need} correct ({need / 128:.1%}) for p < 0.01")
