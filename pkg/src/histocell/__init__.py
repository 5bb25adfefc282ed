"""histocell: per-spot cell-type abundance regression from histology
patch embeddings, plus spatial colocalization analysis."""

from .dataset import (AbundanceMatrix, EmbeddingBlock, Finding, SampleSplit,
                      SchemaError, SpotTable, assemble_embeddings,
                      concat_embeddings, load_abundance_table,
                      load_embedding_block, load_spot_table, make_splits,
                      save_abundance_table, save_spot_table)
from .experiments import (ConfigError, ExperimentConfig, SyntheticSpec,
                          generate_synthetic, parse_config, run_cross_dataset,
                          run_loo)
from .metrics import EvalReport, cc_score, evaluate, l1_score
from .objective import LossBreakdown, composite_loss, mae, mse, pearson_loss
from .patchprep import (PatchBBox, PatchRaster, background_fraction,
                        filter_spots, patch_bbox)
from .regressor import (MlpModel, Standardizer, TrainConfig, fit_standardizer,
                        forward, init_model, load_model, predict, save_model,
                        silu, train, transform)
from .spatial import (ColocMatrix, WeightMatrix, average_coloc,
                      colocalization_matrix, compare_colocalization,
                      default_length_scale, morans_r, rbf_weights,
                      render_heatmap, upgma_order)

__version__ = "0.1.0"
