"""Experiment queue with mutual exclusion of testbed resources.

Dispatch is FIFO with skipping: a blocked ticket does not hold back later
tickets, except that a later ticket may not overtake an earlier queued
ticket it conflicts with, nor eat capacity that earlier blocked tickets
are waiting for.  That keeps per-conflict-group order and rules out
starvation.
"""

import enum
import itertools
import threading
from dataclasses import dataclass, field
from typing import Optional

from .cloud import plan_cloud
from .errors import InvalidTransition, ValidationFailed
from .inventory import Role
from .phys import plan_physical
from .scenario import Finding, ValidationReport, validate_against


@dataclass(frozen=True)
class ResourceClaim:
    hosts: frozenset = frozenset()
    radios: frozenset = frozenset()
    vlan_count: int = 0
    cloud_count: int = 0

    def overlaps(self, other):
        return bool(self.hosts & other.hosts or self.radios & other.radios)


def compute_claim(scenario, testbed):
    """Claim derived from the scenario's plans, never declared by users.

    Cloud runs also claim both VPN gateways, since the tunnels they open
    are exclusive.
    """
    phys = plan_physical(scenario, testbed)
    cloud = plan_cloud(scenario, testbed)
    hosts = set(scenario.members())
    if cloud is not None:
        hosts.add(testbed.gateway(Role.GATEWAY_WORKLOAD).name)
        hosts.add(testbed.gateway(Role.GATEWAY_CONTROL).name)
    return ResourceClaim(frozenset(hosts), frozenset(phys.radios()), len(phys.vlans.assignments),
                         cloud.count if cloud else 0)


class TicketStatus(str, enum.Enum):
    QUEUED = "queued"
    RUNNING = "running"
    FINISHED = "finished"
    CANCELLED = "cancelled"


@dataclass
class Ticket:
    id: int
    scenario: object
    claim: ResourceClaim
    status: TicketStatus = TicketStatus.QUEUED
    report: Optional[object] = None


@dataclass
class Scheduler:
    testbed: object
    vlan_capacity: Optional[int] = None
    cloud_quota: Optional[int] = None
    _tickets: list = field(default_factory=list)
    _ids: object = field(default_factory=lambda: itertools.count(1))
    _lock: object = field(default_factory=threading.Lock)

    def __post_init__(self):
        if self.vlan_capacity is None:
            self.vlan_capacity = len(self.testbed.switch.workload_vlan_ids())

    def submit(self, scenario):
        report = validate_against(scenario, self.testbed)
        if not report.ok:
            raise ValidationFailed(report)
        claim = compute_claim(scenario, self.testbed)
        if self.cloud_quota is not None and claim.cloud_count > self.cloud_quota:
            raise ValidationFailed(ValidationReport((Finding("CloudQuota", str(claim.cloud_count),
                                                             f"quota {self.cloud_quota}"),)))
        if claim.vlan_count > self.vlan_capacity:
            raise ValidationFailed(ValidationReport((Finding("InsufficientVlans", str(claim.vlan_count),
                                                             f"{self.vlan_capacity} available"),)))
        return self.submit_claim(scenario, claim)

    def submit_claim(self, scenario, claim):
        """Queue a ticket with a precomputed claim."""
        with self._lock:
            ticket = Ticket(next(self._ids), scenario, claim)
            self._tickets.append(ticket)
            return ticket

    def _runnable(self, ticket, running, skipped):
        vlans = sum(t.claim.vlan_count for t in running + skipped)
        cloud = sum(t.claim.cloud_count for t in running + skipped)
        if vlans + ticket.claim.vlan_count > self.vlan_capacity:
            return False
        if self.cloud_quota is not None and cloud + ticket.claim.cloud_count > self.cloud_quota:
            return False
        return not any(ticket.claim.overlaps(t.claim) for t in running + skipped)

    def dispatch_next(self):
        """Mark the earliest runnable queued ticket running and return it."""
        with self._lock:
            running = [t for t in self._tickets if t.status == TicketStatus.RUNNING]
            skipped = []
            for ticket in self._tickets:
                if ticket.status != TicketStatus.QUEUED:
                    continue
                if self._runnable(ticket, running, skipped):
                    ticket.status = TicketStatus.RUNNING
                    return ticket
                skipped.append(ticket)
            return None

    def dispatch_all(self):
        out = []
        while (t := self.dispatch_next()) is not None:
            out.append(t)
        return out

    def complete(self, ticket, report=None):
        with self._lock:
            if ticket.status != TicketStatus.RUNNING:
                raise InvalidTransition(f"ticket {ticket.id} is {ticket.status.value}")
            ticket.status = TicketStatus.FINISHED
            ticket.report = report

    def cancel(self, ticket):
        with self._lock:
            if ticket.status != TicketStatus.QUEUED:
                raise InvalidTransition(f"ticket {ticket.id} is {ticket.status.value}")
            ticket.status = TicketStatus.CANCELLED

    def tickets(self, status=None):
        with self._lock:
            return [t for t in self._tickets if status is None or t.status == status]

    def running(self):
        return self.tickets(TicketStatus.RUNNING)

    def queued(self):
        return self.tickets(TicketStatus.QUEUED)
