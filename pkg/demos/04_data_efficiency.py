"""
How accuracy grows with training trials
=======================================

The validation split stays fixed while the training set is cut to ``k``
trials per class. For one seed the subsets are nested, so each larger ``k``
only adds trials. Noise is set high enough that ten trials per class are
not enough.
"""

from eegtext.classifier import ClassifierConfig
from eegtext.dsp import assemble_epochs
from eegtext.encoder import EncoderConfig
from eegtext.ingest import DatasetManifest, LabelMap, SynthSpec, split_train_val, synth_generate
from eegtext.model import Model
from eegtext.trainer import TrainConfig, subsample_epochs, sweep_data_efficiency, sweep_table_csv

seed = 1
names = LabelMap.default(2).class_names
trials = synth_generate(SynthSpec(n_classes=2, trials_per_class=70, seed=seed, noise_sigma=5.0))
manifest = split_train_val(DatasetManifest.from_trials(trials, names), 0.2, seed=seed)
by_path = {t.path: t for t in trials}
epochs = assemble_epochs([by_path[e.path] for e in manifest.entries], class_names=names,
                         splits=[e.split for e in manifest.entries])

###############################################################################
# Nested subsets

small = set(subsample_epochs(epochs, 10, seed).paths)
large = set(subsample_epochs(epochs, 25, seed).paths)
print("k=10 subset inside k=25 subset:", small <= large)

###############################################################################
# The sweep itself

rows = sweep_data_efficiency(
    epochs, [10, 25, 50],
    lambda: Model.init(EncoderConfig.desk(), ClassifierConfig(n_classes=2), seed=seed,
                       class_names=names),
    TrainConfig(epochs=12, seed=seed))
print(sweep_table_csv(rows))
