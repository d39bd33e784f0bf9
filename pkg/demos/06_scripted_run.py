"""The full scripted experiment: train everything, then grade identity, control and transfer.

Stages are cached, so a second invocation only reads results back.
Expect roughly 25 minutes on one core the first time.

    python demos/06_scripted_run.py [RUN_DIR]
"""
import logging
import sys
from pathlib import Path

from cife.pipeline import run_pipeline

logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
result = run_pipeline(sys.argv[1] if len(sys.argv) > 1 else "runs/scripted")
s = result.stages


def line(rep):
    return f"{rep['accuracy']:.3f} ({rep['total_correct']}/{rep['total_samples']}), p={rep['p_value']:.3g}"


print("VAE held-out PSNR", round(s["vae"]["heldout_psnr"], 2), "dB")
print("backbone loss", round(s["backbone_base"]["smoothed_first"], 4), "->", round(s["backbone_base"]["smoothed_last"], 4))
e = s["encoder_same_place"]
print("encoder paired loss", round(e["paired_loss_init"], 5), "->", round(e["paired_loss_trained"], 5))
print("backbone frozen:", e["hashes_before"] == e["hashes_after"])
ev = s["eval"]
print("identity (encoder on) ", line(ev["identity"]))
print("control  (encoder off)", line(ev["control"]))
print("transfer to backbone B", line(ev["transfer"]["backbone_b"]))
print("on/off pixel distance ", round(ev["encoder_on_off_pixel_l2"], 4))
a1, a2 = s["ae_stage1"], s["ae_stage2"]
print("autoencoder reconstruction MSE", round(a1["recon_mse_init"], 4), "->", round(a1["recon_mse_trained"], 4))
print("stage-2 start: from stage 1", round(a2["init_loss_stage1"], 5), "vs random", round(a2["init_loss_random"], 5))
print("contact sheets under", Path(result.root) / "eval")
