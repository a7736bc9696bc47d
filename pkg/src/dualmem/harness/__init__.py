from .evaluate import compute_qa_metrics, compute_spl, rollout, rollout_many
from .report import EvalReport, evaluate
from .stats import wilcoxon_signed_rank
from .train import finetune, pretrain, train
