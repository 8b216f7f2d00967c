import sys, time
import numpy as np
from blockseq.config import RunConfig, build_model_config, build_train_config, build_datasets
from blockseq.model import Transducer
from blockseq.training import train
from blockseq.tasks import eval_model
from blockseq.inference import BeamConfig

lr = float(sys.argv[1]); epochs = int(sys.argv[2]); count = int(sys.argv[3])
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0
run = RunConfig(task="addition", max_digits=2, encoder_widths=(50,), transducer_widths=(50,),
                embed_width=16, attention="none", block_size=1, max_per_block=8,
                train_count=count, val_count=200, eval_count=1000,
                epochs=epochs, lr=lr, align_refresh_period=300, val_beam_width=1, seed=seed)
model = Transducer(build_model_config(run), seed=run.seed)
train_items, val_items, eval_items, fixed = build_datasets(run)
t0 = time.time()
state = train(model, train_items, val_items, build_train_config(run))
for m in state.metrics:
    print(f"epoch {m.epoch}: loss={m.mean_train_loss:.3f} val_lp={m.val_log_prob:.3f} "
          f"val_err={m.val_seq_error:.3f} lr={m.lr:.4f} decays={m.decays}", flush=True)
report = eval_model(model, eval_items, BeamConfig(beam_width=2))
print(f"TOTAL {time.time()-t0:.0f}s eval_seq_err={report.sequence_error_rate:.4f} tok_err={report.token_error_rate:.4f}")
