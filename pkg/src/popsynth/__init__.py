"""popsynth: synthetic survey generation, IPF population synthesis, evaluation."""

from .codebook import (Codebook, SurveyDataset, SurveyRecord, VariableSpec,
                       default_codebook, load_codebook, marginal_distribution,
                       validate_record)
from .errors import (CheckpointError, PopsynthError, ProviderError,
                     ProviderTransportError, ValidationError)
from .genpipe import (GenerationSpec, CheckpointStore, build_prompt,
                      parse_and_validate_batch, request_batch, resume_generation,
                      run_generation)
from .io import (read_benchmark_csv, read_marginals_csv, read_population_csv,
                 read_survey_csv, write_population_csv, write_survey_csv)
from .ipf import (ConstraintSet, FittedWeights, IPFConfig, SyntheticIndividual,
                  SyntheticPopulation, TractMarginals, expand,
                  harmonize_marginals, initial_weights, integerize_trs, ipf_fit,
                  synthesize_population)
from .metrics import (CategoricalDistribution, DeltaTable, DivergenceTable,
                      ResidualReport, category_residuals, divergence_delta,
                      divergence_table, js_divergence, kl_divergence, pearson_r)
from .providers import (GeminiCompatibleProvider, MockProvider,
                        OpenAICompatibleProvider, ProviderClient, RawBatch,
                        SamplingParams, SeededMockProvider, response_schema)
from .sae import (BenchmarkTable, OutcomePredicate, TractEstimates,
                  residual_map, spatial_correlation, tract_estimate)

__version__ = "0.1.0"
