#!/usr/bin/env python
# coding: utf-8

# # Auditing a model behind an HTTP inference server
#
# The remote backend speaks a small JSON protocol (/v1/score,
# /v1/generate, /v1/logprob). We stand up the bundled mock server with a
# keyword-driven "model" and audit one email through it. With four tokens
# the exact estimator needs 16 coalitions per side.

import math

from ccshap_audit.ccshap import audit_email, render_text_report
from ccshap_audit.config import AuditConfig
from ccshap_audit.corpus import CleanEmail, Label
from ccshap_audit.mock_server import MockInferenceServer
from ccshap_audit.remote_client import RemoteBackend, RemoteClient, RemoteEndpoint


def classify(prompt, labels):
    p = 0.2 + 0.5 * ("password" in prompt) + 0.25 * ("verify" in prompt)
    return {"PHISHING": math.log(p), "LEGITIMATE": math.log(1 - p)}


def logprob(prompt, continuation):
    # the "model" finds its explanation likely only when it can see the password request
    text = prompt.split("\n\n")[0]
    return [-0.3 if "password" in text else -1.5, -0.4 if "bank" in text else -0.9]


email = CleanEmail("", "", "verify your bank password", Label.PHISHING)
config = AuditConfig(estimator="exact", template="{sender}{subject}{body}")

with MockInferenceServer(classify=classify, generate=lambda p: "It asks for a bank password.", logprob=logprob) as server:
    client = RemoteClient(RemoteEndpoint(server.url, "mock-llm", max_in_flight=4))
    report = audit_email(email, RemoteBackend(client), config)
    print(f"{len(server.requests)} requests, peak concurrency {server.peak_in_flight}")

print(render_text_report(report))
