#!/usr/bin/env python3

import sys
import asyncio
import logging

from logging import Logger
from typing import Optional
from dataclasses import replace
from argparse import ArgumentParser, Namespace
from config import Configuration, PromptStyle
from harness import Harness
from metrics import RelevanceJudgments, RewardParams
from dataset import load_qrels
from training import GrpoParams
from window import WindowParams
from backend import Backend, BackendConfig, Gateway
from backend.remote import HttpBackend
from backend.mock import (
    IdentityBackend,
    MalformedBackend,
    MalformedMode,
    NoisyBackend,
    OracleBackend,
    ReverseBackend,
)

BACKENDS = ["http", "identity", "reverse", "oracle", "noisy", "malformed"]


common = ArgumentParser(add_help=False)
common.add_argument(
    "-c", "--config", type=str, help="Yaml configuration", default=None
)
common.add_argument(
    "-l", "--log-file", type=str, help="Log file", default=None
)
common.add_argument(
    "-L",
    "--log-level",
    type=str,
    choices=["DEBUG", "INFO", "WARN", "ERROR"],
    help="log level",
    default="INFO",
)

backend_options = ArgumentParser(add_help=False)
backend_options.add_argument(
    "--backend", type=str, choices=BACKENDS, default="http"
)
backend_options.add_argument("--endpoint", type=str, default=None)
backend_options.add_argument("--model", type=str, default=None)
backend_options.add_argument("--temperature", type=float, default=None)
backend_options.add_argument("--max-tokens", type=int, default=None)
backend_options.add_argument(
    "--concurrency", type=int, help="requests in flight", default=None
)
backend_options.add_argument("--retries", type=int, default=None)
backend_options.add_argument(
    "--qrels", type=str, help="judgments (oracle backend)", default=None
)
backend_options.add_argument(
    "--seed", type=int, help="noisy backend and synthesis seed", default=None
)
backend_options.add_argument(
    "--swap-rate", type=float, help="noisy backend swaps", default=0.1
)
backend_options.add_argument(
    "--malformed-mode",
    type=str,
    choices=[mode.value for mode in MalformedMode],
    default=MalformedMode.NO_TAGS.value,
)

window_options = ArgumentParser(add_help=False)
window_options.add_argument(
    "--topn", type=int, help="candidates reranked per query", default=None
)
window_options.add_argument(
    "--window", type=int, help="window size", default=None
)
window_options.add_argument(
    "--stride", type=int, help="window step", default=None
)
window_options.add_argument(
    "--prompt-style",
    type=str,
    choices=[style.value for style in PromptStyle],
    default=None,
)

reward_options = ArgumentParser(add_help=False)
reward_options.add_argument("--phi", type=float, default=None)
reward_options.add_argument("--gamma", type=float, default=None)
reward_options.add_argument("--rbo-p", type=float, default=None)
reward_options.add_argument("--epsilon", type=float, default=None)
reward_options.add_argument("--beta", type=float, default=None)


cla = ArgumentParser(description="reasoning-intensive listwise reranking")
commands = cla.add_subparsers(dest="command", required=True)

rerank = commands.add_parser(
    "rerank",
    parents=[common, backend_options, window_options],
    help="rerank a retrieval run",
)
rerank.add_argument("corpus", type=str, help="passages (jsonl)")
rerank.add_argument("queries", type=str, help="queries (jsonl)")
rerank.add_argument("run", type=str, help="first-stage run")
rerank.add_argument("-o", "--output", type=str, required=True)
rerank.add_argument("--tag", type=str, default="rerank")
rerank.add_argument("--report", type=str, help="key=value report file")
rerank.add_argument(
    "--strict",
    action="store_true",
    help="fail on the first query the backend cannot rerank",
    default=False,
)

evaluation = commands.add_parser(
    "eval", parents=[common], help="NDCG of a run"
)
evaluation.add_argument("run", type=str)
evaluation.add_argument("qrels", type=str)
evaluation.add_argument("-k", type=int, default=10)

reward = commands.add_parser(
    "reward", parents=[common, reward_options], help="score rollouts"
)
reward.add_argument("rollouts", type=str, help="rollouts (jsonl)")
reward.add_argument("labels", type=str, help="synthesized records (jsonl)")
reward.add_argument("-o", "--output", type=str, required=True)

filtering = commands.add_parser(
    "filter", parents=[common], help="self-consistency filter"
)
filtering.add_argument("records", type=str)
filtering.add_argument("-o", "--output", type=str, required=True)
filtering.add_argument("--alpha", type=float, default=None)

export = commands.add_parser(
    "export-sft",
    parents=[common, window_options],
    help="synthesized records as chat training examples",
)
export.add_argument("records", type=str)
export.add_argument("-o", "--output", type=str, required=True)
export.add_argument(
    "--no-reasoning",
    action="store_true",
    help="leave the think block empty",
    default=False,
)

synthesize = commands.add_parser(
    "synthesize",
    parents=[common, backend_options],
    help="label candidate records with a labeling model",
)
synthesize.add_argument("candidates", type=str)
synthesize.add_argument("-o", "--output", type=str, required=True)

plan = commands.add_parser(
    "plan-windows", parents=[common, window_options], help="window ranges"
)
plan.add_argument(
    "--length", type=int, help="list length (default: topn)", default=None
)

latency = commands.add_parser(
    "latency",
    parents=[common, backend_options, window_options],
    help="seconds per query",
)
latency.add_argument("corpus", type=str)
latency.add_argument("queries", type=str)
latency.add_argument("run", type=str)
latency.add_argument("--repeats", type=int, default=1)
latency.add_argument("--report", type=str, help="key=value report file")


def option(arguments: Namespace, name: str):
    return getattr(arguments, name, None)


def override(arguments: Namespace, config: Configuration) -> Configuration:
    """Command line flags take precedence over the configuration file."""

    def pick(name: str, value):
        flag = option(arguments, name)
        return flag if flag is not None else value

    backend = config.backend
    backend = BackendConfig(
        endpoint=pick("endpoint", backend.endpoint),
        model=pick("model", backend.model),
        temperature=pick("temperature", backend.temperature),
        max_tokens=pick("max_tokens", backend.max_tokens),
        timeout=backend.timeout,
        retries=pick("retries", backend.retries),
        backoff_ms=backend.backoff_ms,
        concurrency=pick("concurrency", backend.concurrency),
    )

    params = config.rerank.params
    rerank = replace(
        config.rerank,
        params=WindowParams(
            n=pick("topn", params.n),
            w=pick("window", params.w),
            s=pick("stride", params.s),
        ),
    )
    if option(arguments, "prompt_style") is not None:
        rerank = replace(
            rerank, prompt_style=PromptStyle(arguments.prompt_style)
        )

    reward = config.reward
    grpo = config.grpo
    synthesis = config.synthesis
    return Configuration(
        backend=backend,
        rerank=rerank,
        reward=RewardParams(
            phi=pick("phi", reward.phi),
            gamma=pick("gamma", reward.gamma),
            p=pick("rbo_p", reward.p),
            k=reward.k,
        ),
        grpo=GrpoParams(
            epsilon=pick("epsilon", grpo.epsilon),
            beta=pick("beta", grpo.beta),
        ),
        synthesis=replace(
            synthesis,
            alpha=pick("alpha", synthesis.alpha),
            seed=pick("seed", synthesis.seed),
            temperature=pick("temperature", synthesis.temperature),
        ),
    )


def make_backend(
    arguments: Namespace, logger: Logger, config: BackendConfig
) -> Backend:
    judgments: Optional[RelevanceJudgments] = None
    if arguments.qrels is not None:
        judgments = load_qrels(arguments.qrels)

    match arguments.backend:
        case "identity":
            return IdentityBackend()
        case "reverse":
            return ReverseBackend()
        case "oracle":
            if judgments is None:
                raise ValueError("the oracle backend needs --qrels")
            return OracleBackend(judgments)
        case "noisy":
            inner = None
            if judgments is not None:
                inner = OracleBackend(judgments)
            seed = arguments.seed if arguments.seed is not None else 0
            return NoisyBackend(seed, arguments.swap_rate, inner)
        case "malformed":
            return MalformedBackend(MalformedMode(arguments.malformed_mode))
        case _:
            return HttpBackend(logger, config)


def make_gateway(
    arguments: Namespace, logger: Logger, config: BackendConfig
) -> Gateway:
    gateway_logger = logging.getLogger(f"{logger.name}:backend")
    return Gateway(
        gateway_logger,
        make_backend(arguments, gateway_logger, config),
        config,
    )


def write_lines(path: Optional[str], lines: list[str]):
    if path is None:
        return
    with open(path, "w") as file:
        file.write("".join(line + "\n" for line in lines))


async def start(arguments: Namespace):
    logger = logging.getLogger("rerank")
    config = (
        Configuration.load(arguments.config)
        if arguments.config is not None
        else Configuration.build({})
    )
    config = override(arguments, config)

    match arguments.command:
        case "rerank":
            harness = Harness(
                logger, config, make_gateway(arguments, logger, config.backend)
            )
            report = await harness.cmd_rerank(
                arguments.corpus,
                arguments.queries,
                arguments.run,
                arguments.output,
                qrels=arguments.qrels,
                tag=arguments.tag,
                strict=arguments.strict,
            )
            print(report.render())
            write_lines(arguments.report, report.to_lines())

        case "eval":
            result = Harness(logger, config).cmd_eval(
                arguments.run, arguments.qrels, arguments.k
            )
            print(result.render())
            print("\n".join(result.to_lines()))

        case "reward":
            scored = Harness(logger, config).cmd_reward(
                arguments.rollouts, arguments.labels, arguments.output
            )
            print(
                f"{len(scored.records)} rollouts scored, "
                f"{len(scored.groups)} group losses, "
                f"{len(scored.errors)} errors"
            )

        case "filter":
            filtered = Harness(logger, config).cmd_filter(
                arguments.records, arguments.output, arguments.alpha
            )
            print(filtered.render())
            print("\n".join(filtered.to_lines()))

        case "export-sft":
            count = Harness(logger, config).cmd_export_sft(
                arguments.records,
                arguments.output,
                reasoning=not arguments.no_reasoning,
            )
            print(f"{count} examples written")

        case "synthesize":
            synthesis = config.synthesis
            labeling = replace(
                config.backend,
                temperature=synthesis.temperature,
                max_tokens=synthesis.max_tokens or config.backend.max_tokens,
            )
            harness = Harness(
                logger, config, make_gateway(arguments, logger, labeling)
            )
            run = await harness.cmd_synthesize(
                arguments.candidates, arguments.output
            )
            for qid, cause in run.skipped.items():
                print(f"skipped qid={qid}: {cause}")

        case "plan-windows":
            length = arguments.length or config.rerank.params.n
            for window in Harness(logger, config).plan(length):
                print(f"{window.start} {window.stop}")

        case "latency":
            harness = Harness(
                logger, config, make_gateway(arguments, logger, config.backend)
            )
            measured = await harness.cmd_latency(
                arguments.corpus,
                arguments.queries,
                arguments.run,
                arguments.repeats,
            )
            print(measured.render())
            write_lines(arguments.report, measured.to_lines())


def main():
    "Program entry point"

    arguments = cla.parse_args()

    logging.basicConfig(
        filename=arguments.log_file,
        level=arguments.log_level,
        format="[%(levelname)s] %(name)s: %(message)s",
    )

    try:
        asyncio.run(start(arguments))
    except Exception as exception:
        logging.error(f"Error running {arguments.command}: {exception}")
        sys.exit(1)


if __name__ == "__main__":
    main()
