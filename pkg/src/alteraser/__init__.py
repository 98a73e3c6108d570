"""Second-order machine unlearning for non-sampling matrix-factorization recommenders."""
from .dataio import (ForgetRequest, InteractionDataset, apply_forget, gen_forget_privacy,
                     inject_noise_and_gen_forget, load_movielens, load_tsv, split_per_user)
from .eraser import UnlearnConfig, UnlearnLog, alt_erase, one_erase_pass
from .errors import (AltEraserError, CheckpointError, DataError, DivergenceError,
                     NumericalError, ParseError, ShapeError, SolverError, StaleCacheError)
from .firstorder import TrainConfig, TrainLog, train
from .metrics import EvalReport, ndcg_at_k, rbo, recall_at_k, repredict_score, speedup
from .mfmodel import (ModelState, WeightScheme, init_model, load_checkpoint, loss_efficient,
                      loss_naive, predict, predict_topk, save_checkpoint)
from .subsolver import HFConfig, SubproblemSpec, ah_newton_solve, hf_newton_solve, hvp

__version__ = "0.1.0"
