"""Dataset ingestion, label schema, splits, transforms and synthetic corpora."""

from cxrnet.data.dataset import RecordDataset, meta_matrix
from cxrnet.data.records import (CorpusStats, Record, age_histogram, corpus_stats, label_matrix,
                                 parse_entry_csv, write_entry_csv)
from cxrnet.data.schema import (DISPLAY_NAMES, LABELS, NO_FINDING, NO_FINDING_INDEX, PATHOLOGIES,
                                decode_labels, encode_labels, valid_label_vectors)
from cxrnet.data.splits import SplitPlan, make_splits, official_split, read_image_list
from cxrnet.data.synthetic import Motif, SynthCorpus, SynthSpec, synth_dataset, write_corpus
from cxrnet.data.transforms import (AgeScaler, AugmentParams, apply_augment, augment_train, center_crop,
                                    jitter, load_image, preprocess_eval, resize_bilinear, sample_augment, sample_crop,
                                    save_png, scale_age)

__all__ = [
    "AgeScaler", "AugmentParams", "CorpusStats", "DISPLAY_NAMES", "LABELS", "Motif", "NO_FINDING", "NO_FINDING_INDEX",
    "PATHOLOGIES", "Record", "RecordDataset", "SplitPlan", "SynthCorpus", "SynthSpec", "age_histogram",
    "apply_augment", "augment_train", "center_crop", "corpus_stats", "decode_labels", "encode_labels", "jitter", "label_matrix", "load_image",
    "make_splits", "meta_matrix", "official_split", "parse_entry_csv", "preprocess_eval", "read_image_list",
    "resize_bilinear", "sample_augment", "sample_crop", "save_png", "scale_age", "synth_dataset", "valid_label_vectors", "write_corpus", "write_entry_csv",
]
