"""Group-level firewall rule synthesis from classified flows.

Endpoint addresses are replaced by their security group (members) or
network object (externals) at extraction time, so generalization reduces
to deduplication plus canonical ordering: one allow rule per distinct
(source, destination, service) triple over a default-deny base.
"""

from __future__ import annotations

import ipaddress
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .clustering import SecurityGroups
from .flows import (
    ClassifiedFlow,
    DataError,
    FlowRecord,
    MemberScope,
    classify_peer,
    is_portless,
)

ALLOW = "allow"
DENY = "deny"

GROUP = "group"
OBJ = "object"

UNIVERSE = ipaddress.IPv4Network("0.0.0.0/0")


@dataclass(frozen=True)
class EntityRef:
    """A rule endpoint: a security group id or a network object name."""

    kind: str
    group_id: int = -1
    name: str = ""

    @classmethod
    def group(cls, group_id: int) -> "EntityRef":
        return cls(GROUP, group_id=group_id)

    @classmethod
    def network_object(cls, name: str) -> "EntityRef":
        return cls(OBJ, name=name)

    def sort_key(self) -> tuple[int, int, str]:
        return (0, self.group_id, "") if self.kind == GROUP else (1, 0, self.name)

    def __str__(self) -> str:
        return f"group:{self.group_id}" if self.kind == GROUP else f"object:{self.name}"


@dataclass(frozen=True)
class ServiceTuple:
    protocol: str
    dst_port: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "protocol", self.protocol.upper())
        if not 0 <= self.dst_port <= 65535:
            raise ValueError(f"dst_port {self.dst_port} out of range")
        if is_portless(self.protocol) != (self.dst_port == 0):
            raise ValueError(
                f"dst_port 0 is for portless protocols exactly, got "
                f"{self.protocol}/{self.dst_port}"
            )


@dataclass(frozen=True)
class FirewallRule:
    src: EntityRef
    dst: EntityRef
    service: ServiceTuple
    evidence_count: int
    action: str = ALLOW

    def __post_init__(self) -> None:
        if self.evidence_count < 1:
            raise ValueError("evidence_count must be >= 1")

    def key(self) -> tuple:
        return (
            self.src.sort_key(),
            self.dst.sort_key(),
            self.service.protocol,
            self.service.dst_port,
        )


@dataclass(frozen=True)
class RuleSet:
    """Canonically ordered allow rules over an implicit default deny."""

    rules: tuple[FirewallRule, ...]
    default_action: str = DENY

    @classmethod
    def from_rules(cls, rules: Sequence[FirewallRule]) -> "RuleSet":
        ordered = tuple(sorted(rules, key=FirewallRule.key))
        keys = [r.key() for r in ordered]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (src, dst, service) keys in ruleset")
        return cls(rules=ordered)


def extract_service_flows(
    records: Sequence[ClassifiedFlow],
    groups: SecurityGroups,
    scope: MemberScope,
) -> dict[tuple[EntityRef, EntityRef, ServiceTuple], int]:
    """Map every record to (src ref, dst ref, service), summing evidence.

    Member peers become their security group, external peers their network
    object. Grouping must have covered every member endpoint seen here.
    """
    endpoint_group = groups.endpoint_to_group()
    known_objects = scope.object_names

    def ref(peer, addr: str) -> EntityRef:
        if peer.is_member:
            gid = endpoint_group.get(addr)
            if gid is None:
                raise DataError(
                    f"member endpoint {addr} is not in any security group; "
                    "grouping must precede rule synthesis"
                )
            return EntityRef.group(gid)
        if peer.is_object:
            if peer.value not in known_objects:
                raise DataError(f"network object {peer.value!r} not in scope")
            return EntityRef.network_object(peer.value)
        raise ValueError("records with unknown peers cannot produce rules")

    counts: dict[tuple[EntityRef, EntityRef, ServiceTuple], int] = {}
    for rec in records:
        key = (
            ref(rec.src_class, rec.flow.src_addr),
            ref(rec.dst_class, rec.flow.dst_addr),
            ServiceTuple(rec.flow.protocol, rec.flow.dst_port),
        )
        counts[key] = counts.get(key, 0) + 1
    return counts


def generalize(
    tuple_counts: dict[tuple[EntityRef, EntityRef, ServiceTuple], int]
) -> RuleSet:
    """One allow rule per unique tuple, canonically sorted, default deny."""
    return RuleSet.from_rules(
        [
            FirewallRule(src=s, dst=d, service=svc, evidence_count=count)
            for (s, d, svc), count in tuple_counts.items()
        ]
    )


def _object_networks(scope: MemberScope) -> dict[str, list[ipaddress.IPv4Network]]:
    nets: dict[str, list[ipaddress.IPv4Network]] = {}
    for cidr, name in scope.object_table:
        nets.setdefault(name, []).append(cidr)
    return nets


def _ref_contains(
    a: EntityRef,
    b: EntityRef,
    groups: SecurityGroups,
    obj_nets: dict[str, list[ipaddress.IPv4Network]],
) -> bool:
    """Whether the address set of ``a`` contains the address set of ``b``."""
    if a.kind == GROUP and b.kind == GROUP:
        return a.group_id == b.group_id
    if a.kind == OBJ and b.kind == OBJ:
        a_nets = obj_nets.get(a.name, [])
        return all(
            any(b_net == a_net or b_net.subnet_of(a_net) for a_net in a_nets)
            for b_net in obj_nets.get(b.name, [])
        )
    if a.kind == OBJ and b.kind == GROUP:
        a_nets = obj_nets.get(a.name, [])
        members = groups.groups.get(b.group_id, frozenset())
        return bool(members) and all(
            any(ipaddress.IPv4Address(ep) in net for net in a_nets) for ep in members
        )
    # group contains object: only when every object CIDR is a /32 whose
    # address is a group member.
    members = groups.groups.get(a.group_id, frozenset())
    return all(
        net.prefixlen == 32 and str(net.network_address) in members
        for net in obj_nets.get(b.name, [])
    )


@dataclass
class HygieneReport:
    any_to_any: list[FirewallRule] = field(default_factory=list)
    duplicates: list[FirewallRule] = field(default_factory=list)
    empty_group_refs: list[FirewallRule] = field(default_factory=list)
    redundant: list[tuple[FirewallRule, FirewallRule]] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (
            self.any_to_any or self.duplicates or self.empty_group_refs or self.redundant
        )

    def to_text(self) -> str:
        lines = [
            f"any_to_any: {len(self.any_to_any)}",
            f"duplicates: {len(self.duplicates)}",
            f"empty_group_refs: {len(self.empty_group_refs)}",
            f"redundant_pairs: {len(self.redundant)}",
        ]
        for rule in self.any_to_any:
            lines.append(f"  any-to-any: {format_rule(rule)}")
        for rule in self.duplicates:
            lines.append(f"  duplicate: {format_rule(rule)}")
        for rule in self.empty_group_refs:
            lines.append(f"  empty group ref: {format_rule(rule)}")
        for shadowed, covering in self.redundant:
            lines.append(
                f"  redundant: {format_rule(shadowed)} covered by {format_rule(covering)}"
            )
        return "\n".join(lines) + "\n"


def check_ruleset(
    ruleset: RuleSet, groups: SecurityGroups, scope: MemberScope
) -> HygieneReport:
    """Report-only hygiene pass over a ruleset.

    Flags rules whose two sides both resolve to the universal address set
    (the any-to-any failure mode), duplicate keys, references to groups
    with no members, and rules strictly contained by a wider rule for the
    same service (object-CIDR containment).
    """
    report = HygieneReport()
    obj_nets = _object_networks(scope)

    def universal(ref: EntityRef) -> bool:
        return ref.kind == OBJ and any(
            net == UNIVERSE for net in obj_nets.get(ref.name, [])
        )

    seen_keys: set[tuple] = set()
    for rule in ruleset.rules:
        if universal(rule.src) and universal(rule.dst):
            report.any_to_any.append(rule)
        if rule.key() in seen_keys:
            report.duplicates.append(rule)
        seen_keys.add(rule.key())
        for ref in (rule.src, rule.dst):
            if ref.kind == GROUP and not groups.groups.get(ref.group_id):
                report.empty_group_refs.append(rule)
                break

    by_service: dict[ServiceTuple, list[FirewallRule]] = {}
    for rule in ruleset.rules:
        by_service.setdefault(rule.service, []).append(rule)
    for service_rules in by_service.values():
        for a in service_rules:
            for b in service_rules:
                if a is b:
                    continue
                a_covers_b = _ref_contains(
                    a.src, b.src, groups, obj_nets
                ) and _ref_contains(a.dst, b.dst, groups, obj_nets)
                if not a_covers_b:
                    continue
                b_covers_a = _ref_contains(
                    b.src, a.src, groups, obj_nets
                ) and _ref_contains(b.dst, a.dst, groups, obj_nets)
                if not b_covers_a:
                    report.redundant.append((b, a))
    return report


def make_matcher(
    ruleset: RuleSet, groups: SecurityGroups, scope: MemberScope
) -> Callable[[FlowRecord], str]:
    """Precompiled matcher mapping a flow to allow or deny."""
    endpoint_group = groups.endpoint_to_group()
    allowed = {rule.key() for rule in ruleset.rules}
    cache: dict[str, EntityRef | None] = {}

    def resolve(addr: str) -> EntityRef | None:
        if addr in cache:
            return cache[addr]
        peer = classify_peer(addr, scope)
        ref: EntityRef | None
        if peer.is_member:
            gid = endpoint_group.get(addr)
            ref = EntityRef.group(gid) if gid is not None else None
        elif peer.is_object:
            ref = EntityRef.network_object(peer.value)
        else:
            ref = None
        cache[addr] = ref
        return ref

    def matcher(flow: FlowRecord) -> str:
        src = resolve(flow.src_addr)
        dst = resolve(flow.dst_addr)
        if src is None or dst is None:
            return DENY
        key = (
            src.sort_key(),
            dst.sort_key(),
            flow.protocol.upper(),
            flow.dst_port,
        )
        return ALLOW if key in allowed else DENY

    return matcher


def match(
    ruleset: RuleSet, groups: SecurityGroups, scope: MemberScope, flow: FlowRecord
) -> str:
    """Allow iff the flow's (src ref, dst ref, service) has a rule."""
    return make_matcher(ruleset, groups, scope)(flow)


def format_rule(rule: FirewallRule) -> str:
    return (
        f"{rule.src},{rule.dst},{rule.service.protocol},{rule.service.dst_port},"
        f"{rule.action},{rule.evidence_count}"
    )


RULESET_HEADER = "src_ref,dst_ref,protocol,dst_port,action,evidence_count"


def ruleset_to_csv(ruleset: RuleSet) -> str:
    lines = [RULESET_HEADER]
    lines.extend(format_rule(rule) for rule in ruleset.rules)
    return "\n".join(lines) + "\n"


def _parse_ref(token: str) -> EntityRef:
    kind, _, value = token.partition(":")
    if kind == GROUP:
        return EntityRef.group(int(value))
    if kind == OBJ:
        return EntityRef.network_object(value)
    raise ValueError(f"bad entity reference {token!r}")


def load_ruleset(path) -> RuleSet:
    """Parse a ruleset CSV back into a RuleSet."""
    from pathlib import Path

    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read ruleset {path}: {exc}") from exc
    rules = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line == RULESET_HEADER:
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError(f"ruleset line {lineno}: expected 6 fields")
        try:
            rules.append(
                FirewallRule(
                    src=_parse_ref(parts[0]),
                    dst=_parse_ref(parts[1]),
                    service=ServiceTuple(parts[2], int(parts[3])),
                    evidence_count=int(parts[5]),
                    action=parts[4],
                )
            )
        except ValueError as exc:
            raise DataError(f"ruleset line {lineno}: {exc}") from exc
    return RuleSet.from_rules(rules)
