from .dci import (DciScores, ImportanceMatrix, compactness, dci, dci_scores,
                  fit_importance, modularity)
from .eer import (TrialList, build_trial_list, compute_eer, cosine_scores,
                  cosine_similarity, eer_from_vectors, eer_on_reconstructions,
                  read_trials, write_trials)
from .information import (Estimate, WsepinResult, entropy_from_posterior,
                          estimate_entropy, estimate_mi, mi_from_posterior, wsepin,
                          wsepin_from_posterior)
