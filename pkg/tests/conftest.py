import random

import pytest

from rlhfplan.cluster import ClusterSpec
from rlhfplan.cost_model import AnalyticProfile, CostModel, generate_profile_table
from rlhfplan.model_arith import ModelSpec, preset
from rlhfplan.workflow import WorkloadSpec, build_ppo


def tiny_model(hidden=256, layers=4, heads=8, vocab=1000, head_out=True, **kw):
    return ModelSpec(hidden_size=hidden, intermediate_size=2 * hidden, num_layers=layers,
                     num_attention_heads=heads, num_kv_heads=heads, vocab_size=vocab,
                     has_output_head=head_out, **kw)


def tiny_models(**kw):
    actor = tiny_model(**kw)
    critic = tiny_model(head_out=False, **kw)
    return {"actor": actor, "reference": actor, "critic": critic, "reward": critic}


def llama7b_models():
    actor = preset("llama3-7b")
    critic = preset("llama3-7b", has_output_head=False)
    return {"actor": actor, "reference": actor, "critic": critic, "reward": critic}


def synthetic_tables(models, seed=0, max_tokens=1 << 16, contexts=(128, 256, 512, 1024)):
    """Profile tables sampled from the analytic model with a per-role random speed factor."""
    rng = random.Random(seed)
    out = {}
    for role in sorted(models):
        rate = 400e12 * rng.uniform(0.5, 1.5)
        out[role] = generate_profile_table(AnalyticProfile(models[role], flops_rate=rate),
                                           max_tokens, contexts, {"seed": seed, "role": role})
    return out


TINY_WORKLOAD = WorkloadSpec(batch_size=64, prompt_len=128, gen_len=128, ppo_minibatches=4)


@pytest.fixture
def tiny_setup():
    cluster = ClusterSpec(1, 8)
    models = tiny_models()
    graph = build_ppo(1, TINY_WORKLOAD)
    return cluster, models, graph, CostModel(cluster, models, synthetic_tables(models))
