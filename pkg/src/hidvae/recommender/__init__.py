from .generate import Recommendation, beam_search, default_beam, generate, popularity_baseline
from .model import HierarchyAwareEmbedding, RecConfig, SemanticIDRecommender, history_tokens
from .train import RecState, Stage2Aborted, load_code_tag_names, load_recommender, save_recommender, train_stage2, training_examples
from .trie import NEG_INF, PrefixTrie, TrieError, mask_logits
from .vocab import BOS, EOS, PAD, TokenVocab, code_tag_map, code_tag_names, tag_path, tag_vectors

build_trie = PrefixTrie.build
