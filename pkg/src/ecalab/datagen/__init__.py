from .chess import EmptyCorpusError, Vocabulary, ingest_chess
from .dataset import Dataset, DatasetFormatError, load_dataset, save_dataset
from .pretrain import PretrainConfig, gen_pretrain, pretrain_arrays
from .reasoning import EasyConfig, HardConfig, gen_reasoning_easy, gen_reasoning_hard

__all__ = [
    "Dataset",
    "DatasetFormatError",
    "EasyConfig",
    "EmptyCorpusError",
    "HardConfig",
    "PretrainConfig",
    "Vocabulary",
    "gen_pretrain",
    "gen_reasoning_easy",
    "gen_reasoning_hard",
    "ingest_chess",
    "load_dataset",
    "pretrain_arrays",
    "save_dataset",
]
