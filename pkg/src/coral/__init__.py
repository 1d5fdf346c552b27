"""Collaborative retrieval for LLM-based recommendation: data, prompts, oracle, MDP, DDPG."""

from .dataset import Dataset, Interaction, ItemMeta, generate_synthetic
from .ddpg import Agent, TrainConfig, train
from .embeddings import EmbeddingTable, LogisticMF, WideAndDeep
from .environment import RetrievalEnv, TransitionEncoder
from .estimators import CoralRecommender
from .evaluation import auc, evaluate_policy, f1
from .oracle import RemoteChatOracle, SimulatedOracle
from .prompting import PromptContext, render_prompt

__all__ = [
    "Agent",
    "CoralRecommender",
    "Dataset",
    "EmbeddingTable",
    "Interaction",
    "ItemMeta",
    "LogisticMF",
    "PromptContext",
    "RemoteChatOracle",
    "RetrievalEnv",
    "SimulatedOracle",
    "TrainConfig",
    "TransitionEncoder",
    "WideAndDeep",
    "auc",
    "evaluate_policy",
    "f1",
    "generate_synthetic",
    "render_prompt",
    "train",
]

__version__ = "0.1.0"
