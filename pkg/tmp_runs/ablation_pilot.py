import sys, time
import numpy as np
from blockseq.config import RunConfig, build_model_config, build_train_config, build_datasets
from blockseq.model import Transducer
from blockseq.training import train
from blockseq.tasks import probe_block_accuracy
from blockseq.inference import BeamConfig

span = int(sys.argv[1]); width = int(sys.argv[2]); count = int(sys.argv[3])
epochs = int(sys.argv[4]); lr = float(sys.argv[5]); seed = int(sys.argv[6])

def arm(block_recurrence):
    run = RunConfig(task="probe", probe_blocks=8, probe_span=span, probe_base=10,
                    block_size=width, max_per_block=2,
                    encoder_widths=(24,), transducer_widths=(24,), embed_width=8,
                    attention="none", train_count=count, val_count=100, eval_count=300,
                    epochs=epochs, lr=lr, align_refresh_period=300, val_beam_width=1,
                    seed=seed, block_recurrence=block_recurrence)
    model = Transducer(build_model_config(run), seed=run.seed)
    train_items, val_items, eval_items, fixed = build_datasets(run)
    t0 = time.time()
    state = train(model, train_items, val_items, build_train_config(run), fixed_alignments=fixed)
    acc = probe_block_accuracy(model, eval_items, BeamConfig(beam_width=2))
    print(f"  recurrence={block_recurrence}: block_acc={acc:.3f} "
          f"({time.time()-t0:.0f}s, last val_err={state.metrics[-1].val_seq_error:.3f})", flush=True)
    return acc

print(f"span={span} width={width} count={count} epochs={epochs} lr={lr} seed={seed}", flush=True)
on = arm(True)
off = arm(False)
print(f"GAP = {100*(on-off):.1f} points (on={on:.3f}, off={off:.3f})")
